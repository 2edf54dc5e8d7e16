import numpy as np
import numpy.testing as npt
import pytest

from changer.fusion import (concat_fuse, fdaf_fuse, flow_net, make_fdaf_params)
from changer.tensor import Parameters, Tensor, grad_check, mul, tsum

rng = np.random.default_rng(321)


def _fdaf(c=4, seed=0, zero_flow=False):
    p = Parameters()
    fd = make_fdaf_params(p, "fdaf", c, rng=np.random.default_rng(seed))
    if zero_flow:
        fd.pw_w.data[:] = 0.0
        fd.pw_b.data[:] = 0.0
    return p, fd


def test_flow_net_zero_final_layer_gives_zero_flows():
    p, fd = _fdaf(zero_flow=True)
    x0 = Tensor(rng.normal(size=(1, 4, 8, 8)))
    x1 = Tensor(rng.normal(size=(1, 4, 8, 8)))
    f0, f1 = flow_net(x0, x1, fd)
    npt.assert_array_equal(f0.data, np.zeros((1, 2, 8, 8)))
    npt.assert_array_equal(f1.data, np.zeros((1, 2, 8, 8)))


def test_flow_net_shapes():
    p, fd = _fdaf(c=64, seed=1)
    x0 = Tensor(rng.normal(size=(1, 64, 32, 32)))
    x1 = Tensor(rng.normal(size=(1, 64, 32, 32)))
    f0, f1 = flow_net(x0, x1, fd)
    assert f0.data.shape == (1, 2, 32, 32)
    assert f1.data.shape == (1, 2, 32, 32)


def test_flow_net_order_sensitive():
    # concat is order-sensitive: swapped inputs give different flows
    p, fd = _fdaf(seed=2)
    x0 = Tensor(rng.normal(size=(1, 4, 8, 8)))
    x1 = Tensor(rng.normal(size=(1, 4, 8, 8)))
    f0a, _ = flow_net(x0, x1, fd)
    f0b, _ = flow_net(x1, x0, fd)
    assert not np.array_equal(f0a.data, f0b.data)


def test_fdaf_zero_flow_half_negation():
    p, fd = _fdaf(zero_flow=True)
    x0 = Tensor(rng.normal(size=(2, 4, 8, 8)))
    x1 = Tensor(rng.normal(size=(2, 4, 8, 8)))
    out = fdaf_fuse(x0, x1, fd).data
    assert out.shape == (2, 8, 8, 8)
    npt.assert_array_equal(out[:, :4], x0.data - x1.data)
    npt.assert_array_equal(out[:, 4:], -out[:, :4])


def test_fdaf_identical_inputs_zero_output():
    p, fd = _fdaf(zero_flow=True)
    x = rng.normal(size=(1, 4, 8, 8))
    out = fdaf_fuse(Tensor(x), Tensor(x.copy()), fd).data
    npt.assert_array_equal(out, np.zeros_like(out))


def test_fdaf_zero_flow_antisymmetry_under_swap():
    p, fd = _fdaf(zero_flow=True)
    x0 = Tensor(rng.normal(size=(1, 4, 8, 8)))
    x1 = Tensor(rng.normal(size=(1, 4, 8, 8)))
    a = fdaf_fuse(x0, x1, fd).data
    b = fdaf_fuse(x1, x0, fd).data
    # halves swapped and negated
    npt.assert_array_equal(b[:, :4], -a[:, :4])
    npt.assert_array_equal(b[:, 4:], -a[:, 4:])


def test_fdaf_gradient_check():
    p = Parameters()
    local = np.random.default_rng(8)
    fd = make_fdaf_params(p, "fdaf", 4, rng=local)
    x0 = p.add("x0", local.normal(size=(1, 4, 8, 8)))
    x1 = p.add("x1", local.normal(size=(1, 4, 8, 8)))

    def f():
        out = fdaf_fuse(x0, x1, fd)
        return tsum(mul(out, out))

    report = grad_check(f, p, tol=1e-4)
    assert max(report.values()) <= 1e-4


def test_warp_integer_flow_matches_shift_oracle():
    from changer.tensor import grid_sample
    x = rng.normal(size=(1, 3, 6, 6))
    for (dx, dy) in [(1, 0), (0, 1), (-2, 0), (1, -1)]:
        flow = np.zeros((1, 2, 6, 6))
        flow[:, 0] = dx
        flow[:, 1] = dy
        out = grid_sample(Tensor(x), Tensor(flow)).data
        # oracle: explicit shifted copy with edge clamping
        rows = np.clip(np.arange(6) + dy, 0, 5)
        cols = np.clip(np.arange(6) + dx, 0, 5)
        oracle = x[:, :, rows][:, :, :, cols]
        npt.assert_array_equal(out, oracle)


def test_concat_fuse():
    x0 = Tensor(rng.normal(size=(1, 8, 16, 16)))
    x1 = Tensor(rng.normal(size=(1, 8, 16, 16)))
    out = concat_fuse(x0, x1)
    assert out.data.shape == (1, 16, 16, 16)
    npt.assert_array_equal(out.data[:, :8], x0.data)
    npt.assert_array_equal(out.data[:, 8:], x1.data)
    with pytest.raises(ValueError, match="shape mismatch"):
        concat_fuse(x0, Tensor(np.zeros((1, 8, 8, 8))))


def test_fdaf_param_total_is_analytic():
    # DWConv (2c,1,3,3) + IN affine (2*2c) + PWConv (4,2c,1,1) + bias 4
    p, fd = _fdaf(c=32)
    c2 = 64
    assert p.count() == c2 * 9 + 2 * c2 + 4 * c2 + 4
