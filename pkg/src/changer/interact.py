"""Bi-temporal interaction layers: identity, aggregation-distribution (AD),
and parameter-free channel / spatial feature exchange."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, add, broadcast_c, conv2d, global_avg_pool,
                     kaiming_uniform, mul, relu, select, sigmoid, slice_c)


@dataclass
class ExchangeMask:
    """Boolean selector deciding which positions swap between branches.

    axis "channel": flags has length c, flag i set iff i % p == 0, so the
    exchanged fraction is ceil(c/p)/c ~ 1/p.  axis "spatial": flags has
    length w; columns are tiled in windows of `window` columns and window j
    is exchanged iff j % p == 0; flags broadcast over n, c, h.
    """
    axis: str
    flags: np.ndarray
    p: int
    window: int = 1


def make_channel_mask(c, p):
    if c < 1:
        raise ValueError("make_channel_mask: need c >= 1")
    if p < 2:
        # p=1 would swap the branches entirely, destroying temporal identity
        raise ValueError("make_channel_mask: need p >= 2, got %d" % p)
    flags = (np.arange(c) % p) == 0
    return ExchangeMask(axis="channel", flags=flags, p=p)


def make_spatial_mask(w, p, window=1):
    if w < 1 or window < 1:
        raise ValueError("make_spatial_mask: need w >= 1 and window >= 1")
    if p < 2:
        raise ValueError("make_spatial_mask: need p >= 2, got %d" % p)
    flags = ((np.arange(w) // window) % p) == 0
    return ExchangeMask(axis="spatial", flags=flags, p=p, window=window)


def exchange(x0, x1, mask):
    """Swap branch values at masked positions; zero learnable parameters.

    Gradients route to the branch that supplied each value (a fixed
    permutation, hence exactly linear).
    """
    if x0.data.shape != x1.data.shape:
        raise ValueError("exchange: shape mismatch %s vs %s"
                         % (x0.data.shape, x1.data.shape))
    n, c, h, w = x0.data.shape
    if mask.axis == "channel":
        if len(mask.flags) != c:
            raise ValueError("exchange: channel mask length %d, tensor has %d channels"
                             % (len(mask.flags), c))
        m = mask.flags[None, :, None, None]
    elif mask.axis == "spatial":
        if len(mask.flags) != w:
            raise ValueError("exchange: spatial mask length %d, tensor has %d columns"
                             % (len(mask.flags), w))
        m = mask.flags[None, None, None, :]
    else:
        raise ValueError("unknown mask axis %r" % mask.axis)
    cond = np.broadcast_to(m, x0.data.shape)
    return select(cond, x1, x0), select(cond, x0, x1)


def identity_interact(x0, x1):
    return x0, x1


@dataclass
class ADParams:
    """Squeeze-expand MLP of the aggregation-distribution layer.

    mlp1: c -> c/r, mlp2: c/r -> 2c; the 2c output splits into the two
    per-branch channel-attention logit vectors.
    """
    c: int
    r: int
    mlp1_w: Tensor = field(repr=False, default=None)
    mlp1_b: Tensor = field(repr=False, default=None)
    mlp2_w: Tensor = field(repr=False, default=None)
    mlp2_b: Tensor = field(repr=False, default=None)


def make_ad_params(params, prefix, c, r=4, rng=None):
    if c % r:
        raise ValueError("AD: channels %d not divisible by squeeze ratio %d" % (c, r))
    if rng is None:
        rng = np.random.default_rng(0)
    mid = c // r
    ad = ADParams(c=c, r=r)
    ad.mlp1_w = params.add(prefix + ".mlp1.w",
                           kaiming_uniform(rng, (mid, c, 1, 1), c))
    ad.mlp1_b = params.add(prefix + ".mlp1.b", np.zeros(mid), decay=False)
    ad.mlp2_w = params.add(prefix + ".mlp2.w",
                           kaiming_uniform(rng, (2 * c, mid, 1, 1), mid))
    ad.mlp2_b = params.add(prefix + ".mlp2.b", np.zeros(2 * c), decay=False)
    return ad


def ad_attention(x0, x1, ad):
    """Shared squeeze-expand logits from the pooled branch sum (symmetric in
    the branch order)."""
    pooled = global_avg_pool(add(x0, x1))
    hid = relu(conv2d(pooled, ad.mlp1_w, ad.mlp1_b))
    return conv2d(hid, ad.mlp2_w, ad.mlp2_b)  # (n, 2c, 1, 1)


def ad_interact(x0, x1, ad):
    if x0.data.shape != x1.data.shape:
        raise ValueError("ad_interact: shape mismatch %s vs %s"
                         % (x0.data.shape, x1.data.shape))
    c = x0.data.shape[1]
    if c != ad.c:
        raise ValueError("ad_interact: params built for %d channels, input has %d"
                         % (ad.c, c))
    logits = ad_attention(x0, x1, ad)
    a0 = sigmoid(slice_c(logits, 0, c))
    a1 = sigmoid(slice_c(logits, c, 2 * c))
    out0 = mul(x0, broadcast_c(a0, x0.data.shape))
    out1 = mul(x1, broadcast_c(a1, x1.data.shape))
    return out0, out1
