import numpy as np
import numpy.testing as npt
import pytest

from changer.model import (ChangerModel, CheckpointError, config_for_variant,
                           config_from_text, config_to_text, load_checkpoint,
                           mac_count, save_checkpoint)
from changer.tensor import Tensor

rng = np.random.default_rng(2024)


def _inputs(n=1, size=64):
    return (rng.uniform(size=(n, 3, size, size)),
            rng.uniform(size=(n, 3, size, size)))


def test_output_shape_contract():
    model = ChangerModel(config_for_variant("ex"))
    for size in (32, 64, 96):
        x0, x1 = _inputs(2, size)
        out = model.forward(Tensor(x0), Tensor(x1))
        assert out.data.shape == (2, 2, size, size)


def test_indivisible_input_rejected():
    model = ChangerModel(config_for_variant("vanilla"))
    with pytest.raises(ValueError, match="divisible"):
        model.forward(Tensor(np.zeros((1, 3, 48, 48))),
                      Tensor(np.zeros((1, 3, 48, 48))))


def test_pyramid_shapes():
    model = ChangerModel(config_for_variant("ex"))
    x0, x1 = _inputs(2, 64)
    pyr0, pyr1 = model.encoder_forward(Tensor(x0), Tensor(x1))
    shapes = [f.data.shape for f in pyr0]
    assert shapes == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4),
                      (2, 128, 2, 2)]


def test_siamese_identical_inputs_identical_pyramids():
    # exchange of equal values is the identity and weights are shared
    model = ChangerModel(config_for_variant("ex"))
    x = rng.uniform(size=(1, 3, 64, 64))
    pyr0, pyr1 = model.encoder_forward(Tensor(x), Tensor(x.copy()))
    for f0, f1 in zip(pyr0, pyr1):
        npt.assert_array_equal(f0.data, f1.data)


def test_shared_weights_single_copy():
    # one stored parameter set serves both branches: mutate it, both react
    model = ChangerModel(config_for_variant("vanilla"))
    x = rng.uniform(size=(1, 3, 64, 64))
    pyr0, pyr1 = model.encoder_forward(Tensor(x), Tensor(x.copy()))
    before = pyr0[1].data.copy()
    model.params["stem.conv.w"].data *= 1.5
    pyr0b, pyr1b = model.encoder_forward(Tensor(x), Tensor(x.copy()))
    assert not np.array_equal(pyr0b[1].data, before)
    npt.assert_array_equal(pyr0b[1].data, pyr1b[1].data)


def test_decoder_output_shape():
    cfg = config_for_variant("vanilla")
    model = ChangerModel(cfg)
    x0, x1 = _inputs(1, 64)
    pyr0, _ = model.encoder_forward(Tensor(x0), Tensor(x1))
    out = model.decoder_forward(pyr0)
    assert out.data.shape == (1, 32, 16, 16)


def test_decoder_identical_pyramids_identical_outputs():
    model = ChangerModel(config_for_variant("vanilla"))
    x = rng.uniform(size=(1, 3, 64, 64))
    pyr0, pyr1 = model.encoder_forward(Tensor(x), Tensor(x.copy()))
    f0 = model.decoder_forward(pyr0)
    f1 = model.decoder_forward(pyr1)
    npt.assert_array_equal(f0.data, f1.data)


def test_head_zero_projection_uniform_softmax():
    model = ChangerModel(config_for_variant("vanilla"))
    model.params["head.conv2.w"].data[:] = 0.0
    model.params["head.conv2.b"].data[:] = 0.0
    x0, x1 = _inputs(1, 32)
    out = model.forward(Tensor(x0), Tensor(x1)).data
    npt.assert_array_equal(out, np.zeros_like(out))


def test_determinism():
    x0, x1 = _inputs(1, 32)
    a = ChangerModel(config_for_variant("ex")).forward(Tensor(x0), Tensor(x1))
    b = ChangerModel(config_for_variant("ex")).forward(Tensor(x0), Tensor(x1))
    assert np.array_equal(a.data, b.data)


def test_vanilla_temporal_swap_covariance_at_fused_level():
    model = ChangerModel(config_for_variant("vanilla"))
    x0, x1 = _inputs(1, 32)
    p0, p1 = model.encoder_forward(Tensor(x0), Tensor(x1))
    f0, f1 = model.decoder_forward(p0), model.decoder_forward(p1)
    fused = model.fuse(f0, f1).data
    q0, q1 = model.encoder_forward(Tensor(x1), Tensor(x0))
    g0, g1 = model.decoder_forward(q0), model.decoder_forward(q1)
    fused_swapped = model.fuse(g0, g1).data
    c = fused.shape[1] // 2
    npt.assert_array_equal(fused_swapped[:, :c], fused[:, c:])
    npt.assert_array_equal(fused_swapped[:, c:], fused[:, :c])


# ---------------------------------------------------------------------------
# parameter / compute parity


def test_variant_table_matches_schedules():
    assert config_for_variant("vanilla").stage_interacts == ("none",) * 4
    assert config_for_variant("vanilla").fusion == "concat"
    assert config_for_variant("align").stage_interacts == ("none",) * 4
    assert config_for_variant("align").fusion == "fdaf"
    assert config_for_variant("ad").stage_interacts == ("none", "ad", "ad", "ad")
    assert config_for_variant("ex").stage_interacts == (
        "none", "spatial_ex", "channel_ex", "channel_ex")
    assert config_for_variant("ex").fusion == "fdaf"


def test_param_parity_ex_equals_align():
    ex = ChangerModel(config_for_variant("ex"))
    align = ChangerModel(config_for_variant("align"))
    vanilla = ChangerModel(config_for_variant("vanilla"))
    assert ex.param_count() == align.param_count()
    # vanilla -> align delta is exactly the FlowNet parameter total
    c2 = 2 * 32
    flownet_params = c2 * 9 + 2 * c2 + 4 * c2 + 4
    assert align.param_count() - vanilla.param_count() == flownet_params


def test_mac_parity_ex_equals_align():
    ex = mac_count(config_for_variant("ex"), 64)
    align = mac_count(config_for_variant("align"), 64)
    vanilla = mac_count(config_for_variant("vanilla"), 64)
    assert ex == align
    # FlowNet convs at 1/4 resolution: DW 2c*9 per pixel + PW 4*2c per pixel
    c2 = 2 * 32
    hw = 16 * 16
    flownet_macs = c2 * 9 * hw + 4 * c2 * hw
    assert align - vanilla == flownet_macs


def test_mac_count_conv_formula():
    # head 1x1 conv example: 1x1 conv c_in=4, c_out=8 over hxw counts 32hw
    from changer.tensor import (Tensor as T, conv2d, mac_counter_reset,
                                mac_counter_stop)
    x = T(np.zeros((1, 4, 5, 5)))
    w = T(np.zeros((8, 4, 1, 1)))
    mac_counter_reset()
    conv2d(x, w)
    assert mac_counter_stop() == 1 * 8 * 5 * 5 * 4 * 1


def test_conv_1x1_param_arithmetic():
    from changer.tensor import Parameters
    p = Parameters()
    p.add("w", np.zeros((8, 4, 1, 1)))
    p.add("b", np.zeros(8))
    assert p.count() == 4 * 8 + 8


# ---------------------------------------------------------------------------
# checkpoint round trip


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = ChangerModel(config_for_variant("ex", init_seed=5))
    path = tmp_path / "model.bin"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    for a, b in zip(model.params.leaves(), loaded.params.leaves()):
        assert a.name == b.name
        assert np.array_equal(a.tensor.data, b.tensor.data)
    # second save produces identical bytes
    path2 = tmp_path / "model2.bin"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = ChangerModel(config_for_variant("vanilla"))
    path = tmp_path / "model.bin"
    save_checkpoint(path, model)
    (tmp_path / "trunc.bin").write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.bin")


def test_model_config_text_round_trip():
    cfg = config_for_variant("ad", exchange_p=4, spatial_window=2, init_seed=9)
    assert config_from_text(config_to_text(cfg)) == cfg
