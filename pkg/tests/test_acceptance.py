"""Acceptance gate: one test (and one printed pass/fail line) per shipping
criterion.  These are end-to-end properties; unit-level coverage lives in the
per-module test files.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  Criteria 7 and 8 train real models and dominate the runtime.
"""

import math
import time

import numpy as np
import numpy.testing as npt

from changer.config import RunConfig, parse_config, serialize_config
from changer.fusion import fdaf_fuse, make_fdaf_params
from changer.gradchecks import run_checks
from changer.interact import exchange, make_channel_mask, make_spatial_mask
from changer.model import (ChangerModel, config_for_variant, load_checkpoint,
                           mac_count, save_checkpoint)
from changer.tensor import Parameters, Tensor, grid_sample
from changer.train import (TrainConfig, adamw_init, adamw_step, ce_loss,
                           poly_lr, synth_generate, train_loop)


def _report(num, name, ok, detail=""):
    line = "criterion %d (%s): %s" % (num, name, "PASS" if ok else "FAIL")
    if detail:
        line += "  [%s]" % detail
    print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_criterion_1_exchange_algebra():
    """200 random configurations per axis: involution, conservation, swap
    equivariance, multiset preservation."""
    t0 = time.time()
    rng = np.random.default_rng(11)
    for axis in ("channel", "spatial"):
        for _ in range(200):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(2, 17))
            h = int(rng.integers(1, 9))
            w = int(rng.integers(1, 17))
            p = int(rng.choice([2, 4, 8, 16, 32]))
            if axis == "channel":
                mask = make_channel_mask(c, p)
            else:
                window = int(rng.choice([1, 2, 4, 8]))
                mask = make_spatial_mask(w, p, window)
            x0 = Tensor(rng.normal(size=(n, c, h, w)))
            x1 = Tensor(rng.normal(size=(n, c, h, w)))
            a, b = exchange(x0, x1, mask)
            # involution
            aa, bb = exchange(a, b, mask)
            npt.assert_array_equal(aa.data, x0.data)
            npt.assert_array_equal(bb.data, x1.data)
            # elementwise conservation, exact
            npt.assert_array_equal(a.data + b.data, x0.data + x1.data)
            # swap equivariance
            c0, c1 = exchange(x1, x0, mask)
            npt.assert_array_equal(c0.data, b.data)
            npt.assert_array_equal(c1.data, a.data)
            # multiset preservation at every position
            npt.assert_array_equal(np.minimum(a.data, b.data),
                                   np.minimum(x0.data, x1.data))
            npt.assert_array_equal(np.maximum(a.data, b.data),
                                   np.maximum(x0.data, x1.data))
    dt = time.time() - t0
    _report(1, "exchange algebra", dt < 10.0, "400 configs in %.1fs" % dt)


def test_criterion_2_parameter_and_mac_parity():
    """Interaction layers are parameter- and computation-free: ex == align
    exactly, and the vanilla -> align gap is the flow branch alone."""
    ex = ChangerModel(config_for_variant("ex"))
    align = ChangerModel(config_for_variant("align"))
    vanilla = ChangerModel(config_for_variant("vanilla"))
    params_ok = ex.param_count() == align.param_count()
    c2 = 2 * 32  # fused width: two decoder_dim=32 branches
    flow_params = c2 * 9 + 2 * c2 + 4 * c2 + 4
    delta_ok = align.param_count() - vanilla.param_count() == flow_params
    m_ex = mac_count(config_for_variant("ex"), 64)
    m_align = mac_count(config_for_variant("align"), 64)
    m_vanilla = mac_count(config_for_variant("vanilla"), 64)
    hw = 16 * 16  # flow branch runs at 1/4 resolution
    flow_macs = (c2 * 9 + 4 * c2) * hw
    macs_ok = m_ex == m_align and m_align - m_vanilla == flow_macs
    _report(2, "param/MAC parity", params_ok and delta_ok and macs_ok,
            "params ex=align=%d, vanilla+%d; macs ex=align=%d, vanilla+%d"
            % (ex.param_count(), flow_params, m_ex, flow_macs))


def test_criterion_3_gradient_suite():
    """Every named check passes its tier: 1e-6 for plain ops, 1e-4 for
    grid_sample, FDAF and the assembled model on (1,3,32,32)."""
    t0 = time.time()
    results = run_checks("all", seed=0)
    dt = time.time() - t0
    worst = max(r[1] / r[2] for r in results)
    ok = all(r[3] for r in results) and dt < 300.0
    _report(3, "gradient suite", ok,
            "%d checks, worst err/tol %.2e, %.1fs" % (len(results), worst, dt))


def test_criterion_4_fdaf_identities():
    t0 = time.time()
    rng = np.random.default_rng(5)
    p = Parameters()
    fd = make_fdaf_params(p, "fdaf", 4, rng=rng)
    fd.pw_w.data[:] = 0.0
    fd.pw_b.data[:] = 0.0
    x0 = Tensor(rng.normal(size=(2, 4, 8, 8)))
    x1 = Tensor(rng.normal(size=(2, 4, 8, 8)))
    out = fdaf_fuse(x0, x1, fd).data
    npt.assert_array_equal(out[:, 4:], -out[:, :4])  # half negation
    same = fdaf_fuse(x0, Tensor(x0.data.copy()), fd).data
    npt.assert_array_equal(same, np.zeros_like(same))  # fdaf(x,x)=0
    # integer flows reduce to an index-shifted copy with edge clamping
    x = rng.normal(size=(1, 3, 6, 6))
    for dx, dy in [(1, 0), (0, -2), (2, 1)]:
        flow = np.zeros((1, 2, 6, 6))
        flow[:, 0], flow[:, 1] = dx, dy
        got = grid_sample(Tensor(x), Tensor(flow)).data
        rows = np.clip(np.arange(6) + dy, 0, 5)
        cols = np.clip(np.arange(6) + dx, 0, 5)
        npt.assert_array_equal(got, x[:, :, rows][:, :, :, cols])
    dt = time.time() - t0
    _report(4, "FDAF identities", dt < 5.0, "%.2fs" % dt)


def test_criterion_5_mask_ratios():
    """Exchanged-channel counts follow ceil(c/p) over the ratio grid, and the
    spatial tiling matches a brute-force per-column oracle for every width
    up to 64."""
    for c in (8, 16, 64):
        for p in (2, 4, 8, 16, 32):
            mask = make_channel_mask(c, p)
            assert int(np.count_nonzero(mask.flags)) == math.ceil(c / p)
    for w in range(1, 65):
        for p in (2, 4, 8, 16, 32):
            for window in (1, 2, 4, 8):
                mask = make_spatial_mask(w, p, window)
                oracle = np.array([(j // window) % p == 0 for j in range(w)])
                npt.assert_array_equal(mask.flags, oracle)
    _report(5, "mask ratios", True,
            "15 channel grids + 1280 spatial tilings")


def test_criterion_6_optimizer_oracle():
    """AdamW with wd=0 follows an independently hand-rolled Adam on a 5-dim
    quadratic for 100 steps; decoupled decay shrinks a zero-gradient weight
    by exactly (1 - lr*wd) per step."""
    rng = np.random.default_rng(3)
    target = rng.normal(size=5)
    x0 = rng.normal(size=5)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8

    params = Parameters()
    x = params.add("x", x0.copy())
    state = adamw_init()
    ref, m, v = x0.copy(), np.zeros(5), np.zeros(5)
    worst = 0.0
    for t in range(1, 101):
        params.zero_grad()
        x.grad = 2.0 * (x.data - target)
        adamw_step(params, state, lr, 0.0, betas=(b1, b2), eps=eps)
        g = 2.0 * (ref - target)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        ref = ref - lr * mh / (np.sqrt(vh) + eps)
        worst = max(worst, float(np.max(np.abs(x.data - ref))))
    traj_ok = worst <= 1e-12

    params2 = Parameters()
    w = params2.add("w", np.full(3, 2.0))
    state2 = adamw_init()
    wd = 0.05
    for t in range(10):
        params2.zero_grad()
        w.grad = np.zeros(3)
        adamw_step(params2, state2, lr, wd)
    decay_ok = np.allclose(w.data, 2.0 * (1 - lr * wd) ** 10,
                           rtol=0.0, atol=1e-12)
    _report(6, "optimizer oracle", traj_ok and decay_ok,
            "trajectory gap %.2e over 100 steps" % worst)


def test_criterion_7_overfit_smoke():
    """Each variant drives training CE below 0.05 on one repeated synthetic
    batch within 500 iterations (seed 0)."""
    t0 = time.time()
    tcfg = TrainConfig(max_iters=500)
    samples = synth_generate(0, 4, 32, 1.0)
    x0 = Tensor(np.stack([s.x0 for s in samples]))
    x1 = Tensor(np.stack([s.x1 for s in samples]))
    y = np.stack([s.y for s in samples])
    hits = {}
    for variant in ("vanilla", "align", "ad", "ex"):
        model = ChangerModel(config_for_variant(variant, init_seed=0))
        state = adamw_init()
        hits[variant] = None
        for it in range(tcfg.max_iters):
            model.params.zero_grad()
            loss = ce_loss(model.forward(x0, x1), y)
            if float(loss.data) < 0.05:
                hits[variant] = it
                break
            loss.backward()
            adamw_step(model.params, state, poly_lr(it, tcfg), 0.0)
    dt = time.time() - t0
    ok = all(h is not None for h in hits.values()) and dt < 600.0
    _report(7, "overfit smoke", ok,
            "iters to CE<0.05: %s, %.0fs total"
            % ({k: v for k, v in hits.items()}, dt))


def test_criterion_8_desk_scale_training(tmp_path):
    """Default desk run (200 synthetic samples, 2000 iterations, seed 0)
    reaches eval F1 >= 0.80.  Threshold calibrated over seeds 0-2; see
    docs/calibration.md."""
    cfg = RunConfig()  # defaults: ex variant, 2000 iters, 200 samples, seed 0
    from changer.config import model_config, train_config
    train_set = synth_generate(cfg.seed, cfg.train_samples, cfg.image_size,
                               cfg.difficulty)
    eval_set = synth_generate(cfg.seed + 1000003, cfg.eval_samples,
                              cfg.image_size, cfg.difficulty)
    _, _, report = train_loop(model_config(cfg), train_config(cfg),
                              train_set, eval_set)
    _report(8, "desk-scale training", report.f1 >= 0.80,
            "eval F1 %.4f (threshold 0.80)" % report.f1)


def test_criterion_9_determinism_and_round_trips(tmp_path):
    cfg = RunConfig()
    from changer.config import model_config, train_config
    mcfg = model_config(cfg)
    tcfg = TrainConfig(max_iters=5, eval_interval=3, seed=7)
    train_set = synth_generate(7, 8, 32, 1.0)
    eval_set = synth_generate(7 + 1000003, 4, 32, 1.0)
    log_a, log_b = tmp_path / "a.csv", tmp_path / "b.csv"
    model, _, report = train_loop(mcfg, tcfg, train_set, eval_set,
                                  log_path=log_a,
                                  checkpoint_path=tmp_path / "ckpt.bin")
    train_loop(mcfg, tcfg, train_set, eval_set, log_path=log_b)
    csv_ok = log_a.read_bytes() == log_b.read_bytes()

    loaded = load_checkpoint(tmp_path / "ckpt.bin")
    ckpt_ok = loaded.cfg == model.cfg and all(
        np.array_equal(a.tensor.data, b.tensor.data)
        for a, b in zip(model.params.leaves(), loaded.params.leaves()))
    save_checkpoint(tmp_path / "ckpt2.bin", loaded)
    ckpt_ok = ckpt_ok and ((tmp_path / "ckpt.bin").read_bytes()
                           == (tmp_path / "ckpt2.bin").read_bytes())

    text = serialize_config(cfg)
    cfg_ok = (parse_config(text) == cfg
              and serialize_config(parse_config(text)) == text)
    _report(9, "determinism and round-trips", csv_ok and ckpt_ok and cfg_ok,
            "csv byte-identical, checkpoint bit-exact, config fixed point")
