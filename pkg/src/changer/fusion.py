"""Fusion layers for the two decoded temporal features: plain channel
concatenation and flow dual-alignment fusion (FDAF).

FDAF predicts two pixel-offset fields from the concatenated branch features
(depthwise conv + instance norm + GELU + pointwise conv), warps each branch
toward the other, and concatenates the two warped-minus-original differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, concat_c, conv2d, gelu, grid_sample,
                     instance_norm, kaiming_uniform, slice_c, sub)


@dataclass
class FDAFParams:
    """FlowNet weights: DWConv(k=3, groups=2c) -> IN -> GELU -> PWConv(2c->4)."""
    c: int
    dw_w: Tensor = field(repr=False, default=None)
    in_gamma: Tensor = field(repr=False, default=None)
    in_beta: Tensor = field(repr=False, default=None)
    pw_w: Tensor = field(repr=False, default=None)
    pw_b: Tensor = field(repr=False, default=None)


def make_fdaf_params(params, prefix, c, rng=None):
    if rng is None:
        rng = np.random.default_rng(0)
    fd = FDAFParams(c=c)
    c2 = 2 * c
    fd.dw_w = params.add(prefix + ".dw.w", kaiming_uniform(rng, (c2, 1, 3, 3), 9))
    fd.in_gamma = params.add(prefix + ".in.gamma", np.ones(c2), decay=False)
    fd.in_beta = params.add(prefix + ".in.beta", np.zeros(c2), decay=False)
    fd.pw_w = params.add(prefix + ".pw.w", kaiming_uniform(rng, (4, c2, 1, 1), c2))
    fd.pw_b = params.add(prefix + ".pw.b", np.zeros(4), decay=False)
    return fd


def flow_net(x0, x1, fd):
    """Predict the two offset fields from the concatenated branch pair.

    Returns (flow0, flow1), each (n,2,h,w): channel 0 is the column offset,
    channel 1 the row offset, in pixels of the feature grid.
    """
    if x0.data.shape != x1.data.shape:
        raise ValueError("flow_net: shape mismatch %s vs %s"
                         % (x0.data.shape, x1.data.shape))
    c = x0.data.shape[1]
    if c != fd.c:
        raise ValueError("flow_net: params built for %d channels, input has %d"
                         % (fd.c, c))
    z = concat_c([x0, x1])
    z = conv2d(z, fd.dw_w, stride=1, pad=1, groups=2 * c)
    z = instance_norm(z, fd.in_gamma, fd.in_beta)
    z = gelu(z)
    z = conv2d(z, fd.pw_w, fd.pw_b)  # (n, 4, h, w)
    return slice_c(z, 0, 2), slice_c(z, 2, 4)


def fdaf_fuse(x0, x1, fd):
    """Concat of (warp(x0, flow0) - x1, warp(x1, flow1) - x0); (n,2c,h,w)."""
    flow0, flow1 = flow_net(x0, x1, fd)
    d0 = sub(grid_sample(x0, flow0), x1)
    d1 = sub(grid_sample(x1, flow1), x0)
    return concat_c([d0, d1])


def concat_fuse(x0, x1):
    """Vanilla fusion: channel concatenation, zero parameters."""
    if x0.data.shape != x1.data.shape:
        raise ValueError("concat_fuse: shape mismatch %s vs %s"
                         % (x0.data.shape, x1.data.shape))
    return concat_c([x0, x1])
