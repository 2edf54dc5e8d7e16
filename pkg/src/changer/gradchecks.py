"""Named finite-difference gradient checks over every differentiable op and
the assembled model.  Each check builds a small random instance, wraps the
inputs as parameter leaves, and compares analytic gradients against central
differences."""

import numpy as np

from . import fusion as fusion_mod
from . import interact as interact_mod
from .model import ChangerModel, config_for_variant
from .tensor import (Parameters, Tensor, activation, bilinear_upsample,
                     conv2d, global_avg_pool, grad_check, grid_sample,
                     instance_norm, maxpool2x2, mul, tsum)
from .train import ce_loss


def _jitter(rng, shape, margin=0.05):
    """Random values bounded away from 0 (relu/maxpool kinks)."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _check_conv(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(2, 4, 6, 6)))
    w = p.add("w", rng.normal(size=(6, 2, 3, 3)) * 0.3)
    b = p.add("b", rng.normal(size=6) * 0.1)

    def f():
        out = conv2d(x, w, b, stride=2, pad=1, groups=2)
        return tsum(mul(out, out))
    return f, p


def _check_depthwise(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(1, 4, 5, 5)))
    w = p.add("w", rng.normal(size=(4, 1, 3, 3)) * 0.3)

    def f():
        out = conv2d(x, w, stride=1, pad=1, groups=4)
        return tsum(mul(out, out))
    return f, p


def _check_linear(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(2, 5, 3, 3)))
    w = p.add("w", rng.normal(size=(4, 5, 1, 1)) * 0.4)
    b = p.add("b", rng.normal(size=4) * 0.1)

    def f():
        return tsum(activation(conv2d(x, w, b), "sigmoid"))
    return f, p


def _check_act(kind):
    def build(seed, tol):
        rng = np.random.default_rng(seed)
        p = Parameters()
        x = p.add("x", _jitter(rng, (2, 3, 4, 4)) * 2.0)

        def f():
            out = activation(x, kind)
            return tsum(mul(out, out))
        return f, p
    return build


def _check_instance_norm(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(2, 3, 4, 4)))
    gamma = p.add("gamma", rng.uniform(0.5, 1.5, size=3))
    beta = p.add("beta", rng.normal(size=3) * 0.2)

    def f():
        out = instance_norm(x, gamma, beta)
        return tsum(mul(out, out))
    return f, p


def _check_gap(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(2, 3, 4, 4)))

    def f():
        out = global_avg_pool(x)
        return tsum(mul(out, out))
    return f, p


def _check_maxpool(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", _jitter(rng, (2, 3, 6, 6)))

    def f():
        out = maxpool2x2(x)
        return tsum(mul(out, out))
    return f, p


def _check_upsample(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(1, 3, 4, 4)))

    def f():
        out = bilinear_upsample(x, 2)
        return tsum(mul(out, out))
    return f, p


def _check_grid_sample(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x = p.add("x", rng.normal(size=(1, 3, 6, 6)))
    # fractional offsets kept off cell boundaries so central differences
    # stay inside one bilinear cell
    base = rng.integers(-1, 2, size=(1, 2, 6, 6)).astype(np.float64)
    flow = p.add("flow", base + rng.uniform(0.15, 0.4, size=(1, 2, 6, 6)))

    def f():
        out = grid_sample(x, flow)
        return tsum(mul(out, out))
    return f, p


def _check_exchange(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x0 = p.add("x0", rng.normal(size=(1, 6, 4, 4)))
    x1 = p.add("x1", rng.normal(size=(1, 6, 4, 4)))
    cmask = interact_mod.make_channel_mask(6, 2)
    smask = interact_mod.make_spatial_mask(4, 2, 1)

    def f():
        a, b = interact_mod.exchange(x0, x1, cmask)
        a, b = interact_mod.exchange(a, b, smask)
        return tsum(mul(a, b))
    return f, p


def _check_ad(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x0 = p.add("x0", rng.normal(size=(1, 8, 4, 4)))
    x1 = p.add("x1", rng.normal(size=(1, 8, 4, 4)))
    ad = interact_mod.make_ad_params(p, "ad", 8, r=4, rng=rng)

    def f():
        a, b = interact_mod.ad_interact(x0, x1, ad)
        return tsum(mul(a, b))
    return f, p


def _check_fdaf(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    x0 = p.add("x0", rng.normal(size=(1, 4, 8, 8)))
    x1 = p.add("x1", rng.normal(size=(1, 4, 8, 8)))
    fd = fusion_mod.make_fdaf_params(p, "fdaf", 4, rng=rng)

    def f():
        out = fusion_mod.fdaf_fuse(x0, x1, fd)
        return tsum(mul(out, out))
    return f, p


def _check_ce(seed, tol):
    rng = np.random.default_rng(seed)
    p = Parameters()
    logits = p.add("logits", rng.normal(size=(2, 2, 4, 4)))
    y = rng.integers(0, 2, size=(2, 4, 4))

    def f():
        return ce_loss(logits, y)
    return f, p


def _check_decoder(seed, tol):
    rng = np.random.default_rng(seed)
    cfg = config_for_variant("vanilla", widths=(4, 4, 8, 8), decoder_dim=4,
                             init_seed=seed)
    model = ChangerModel(cfg)
    p = model.params
    pyr = [Tensor(rng.normal(size=(1, c, 8 // 2 ** i, 8 // 2 ** i)))
           for i, c in enumerate(cfg.widths)]

    def f():
        out = model.decoder_forward(pyr)
        return tsum(mul(out, out))
    return f, p


def _check_model(variant):
    def build(seed, tol):
        cfg = config_for_variant(variant, init_seed=seed)
        model = ChangerModel(cfg)
        rng = np.random.default_rng(seed + 1)
        # jitter to a generic parameter point: zero-initialized norm shifts
        # put degenerate (1x1-plane) stage outputs exactly on the relu kink
        for leaf in model.params.leaves():
            leaf.tensor.data += rng.normal(0.0, 0.03,
                                           size=leaf.tensor.data.shape)
        x0 = rng.uniform(0.0, 1.0, size=(1, 3, 32, 32))
        x1 = rng.uniform(0.0, 1.0, size=(1, 3, 32, 32))
        y = rng.integers(0, 2, size=(1, 32, 32))

        def f():
            logits = model.forward(Tensor(x0), Tensor(x1))
            return ce_loss(logits, y)
        return f, model.params
    return build


# name -> (builder, tolerance, coords per leaf)
CHECKS = {
    "conv": (_check_conv, 1e-6, 8),
    "depthwise": (_check_depthwise, 1e-6, 8),
    "linear": (_check_linear, 1e-6, 8),
    "sigmoid": (_check_act("sigmoid"), 1e-6, 8),
    "gelu": (_check_act("gelu"), 1e-6, 8),
    "relu": (_check_act("relu"), 1e-6, 8),
    "instance_norm": (_check_instance_norm, 1e-6, 8),
    "gap": (_check_gap, 1e-6, 8),
    "maxpool": (_check_maxpool, 1e-6, 8),
    "upsample": (_check_upsample, 1e-6, 8),
    "grid_sample": (_check_grid_sample, 1e-4, 8),
    "exchange": (_check_exchange, 1e-6, 8),
    "ad": (_check_ad, 1e-6, 8),
    "fdaf": (_check_fdaf, 1e-4, 8),
    "ce": (_check_ce, 1e-6, 8),
    "decoder": (_check_decoder, 1e-6, 4),
    "model_ex": (_check_model("ex"), 1e-4, 2),
    "model_ad": (_check_model("ad"), 1e-4, 2),
}

SCOPES = {
    "tensor": ["conv", "depthwise", "linear", "sigmoid", "gelu", "relu",
               "instance_norm", "gap", "maxpool", "upsample", "grid_sample"],
    "interact": ["exchange", "ad"],
    "fusion": ["fdaf"],
    "model": ["decoder", "model_ex", "model_ad"],
    "train": ["ce"],
}
SCOPES["all"] = sum((SCOPES[k] for k in
                     ("tensor", "interact", "fusion", "model", "train")), [])


def resolve_scope(scope):
    if scope in SCOPES:
        return SCOPES[scope]
    if scope in CHECKS:
        return [scope]
    raise KeyError("unknown gradcheck scope %r" % scope)


def run_checks(scope="all", seed=0, tol=None):
    """Run the named checks; returns [(name, worst_err, tol, passed)]."""
    results = []
    for name in resolve_scope(scope):
        builder, default_tol, coords = CHECKS[name]
        use_tol = default_tol if tol is None else tol
        f, params = builder(seed, use_tol)
        report = grad_check(f, params, tol=use_tol, max_coords=coords,
                            rng=np.random.default_rng(seed + 7))
        worst = max(report.values()) if report else 0.0
        results.append((name, worst, use_tol, worst <= use_tol))
    return results
