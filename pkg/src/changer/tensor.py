"""Minimal NCHW tensor core with reverse-mode differentiation.

Everything is float64. Forward ops are pure functions building a tape of
closure-based backward rules; `Tensor.backward()` walks the tape in reverse
topological order and accumulates gradients into the leaves.
"""

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Global multiply-accumulate counter, incremented by conv2d when enabled.
# Used by the analytic compute audit (mac_count) and the exchange-is-free check.
_mac_counter = {"enabled": False, "macs": 0}


def mac_counter_reset():
    _mac_counter["enabled"] = True
    _mac_counter["macs"] = 0


def mac_counter_stop():
    _mac_counter["enabled"] = False
    return _mac_counter["macs"]


class Tensor:
    """Dense float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self.data.size != 1:
            raise ValueError(
                "backward requires a scalar, got shape %s" % (self.data.shape,))
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data, prev, backward):
    requires = any(p.requires_grad for p in prev)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._prev = tuple(prev)
        out._backward = backward
    return out


def _check_same_shape(x, y, op):
    if x.data.shape != y.data.shape:
        raise ValueError("%s: shape mismatch %s vs %s"
                         % (op, x.data.shape, y.data.shape))


# ---------------------------------------------------------------------------
# elementwise / reduction


def ew(x, y, kind):
    """Elementwise add/sub/mul of two same-shape tensors."""
    _check_same_shape(x, y, "ew(%s)" % kind)
    if kind == "add":
        data = x.data + y.data

        def back(g):
            _accum(x, g)
            _accum(y, g)
    elif kind == "sub":
        data = x.data - y.data

        def back(g):
            _accum(x, g)
            _accum(y, -g)
    elif kind == "mul":
        data = x.data * y.data

        def back(g):
            _accum(x, g * y.data)
            _accum(y, g * x.data)
    else:
        raise ValueError("unknown elementwise kind %r" % kind)
    return _make(data, (x, y), back)


def add(x, y):
    return ew(x, y, "add")


def sub(x, y):
    return ew(x, y, "sub")


def mul(x, y):
    return ew(x, y, "mul")


def neg(x):
    def back(g):
        _accum(x, -g)
    return _make(-x.data, (x,), back)


def scale(x, s):
    s = float(s)

    def back(g):
        _accum(x, g * s)
    return _make(x.data * s, (x,), back)


def tsum(x):
    """Sum of all entries, as a scalar tensor."""
    def back(g):
        _accum(x, np.full_like(x.data, float(g)))
    return _make(np.float64(x.data.sum()), (x,), back)


def tmean(x):
    return scale(tsum(x), 1.0 / x.data.size)


def select(cond, a, b):
    """where(cond, a, b); gradients route to whichever branch supplied the value."""
    _check_same_shape(a, b, "select")
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)

    def back(g):
        _accum(a, np.where(cond, g, 0.0))
        _accum(b, np.where(cond, 0.0, g))
    return _make(data, (a, b), back)


def broadcast_c(v, like_shape):
    """Broadcast a (n,c,1,1) tensor over the spatial dims of like_shape."""
    n, c, h, w = like_shape
    if v.data.shape != (n, c, 1, 1):
        raise ValueError("broadcast_c expects (n,c,1,1), got %s" % (v.data.shape,))
    data = np.broadcast_to(v.data, like_shape).copy()

    def back(g):
        _accum(v, g.sum(axis=(2, 3), keepdims=True))
    return _make(data, (v,), back)


# ---------------------------------------------------------------------------
# activations


def activation(x, kind):
    if kind == "sigmoid":
        s = expit(x.data)

        def back(g):
            _accum(x, g * s * (1.0 - s))
        return _make(s, (x,), back)
    if kind == "relu":
        data = np.maximum(x.data, 0.0)

        def back(g):
            _accum(x, g * (x.data > 0.0))
        return _make(data, (x,), back)
    if kind == "gelu":
        # exact erf form; the tanh approximation would fail 1e-6 grad checks
        phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        data = x.data * phi

        def back(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            _accum(x, g * (phi + x.data * pdf))
        return _make(data, (x,), back)
    raise ValueError("unknown activation %r" % kind)


def sigmoid(x):
    return activation(x, "sigmoid")


def relu(x):
    return activation(x, "relu")


def gelu(x):
    return activation(x, "gelu")


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp, k, stride, ho, wo):
    # view of shape (n, c, k, k, ho, wo); must be copied before reshaping
    n, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))


def _col2im(dcols, xshape, k, stride, pad, ho, wo):
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] \
                += dcols[:, :, u, v]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x, weight, bias=None, stride=1, pad=0, groups=1):
    """2D convolution (cross-correlation) on NCHW input.

    weight: (c_out, c_in/groups, k, k).  groups=c_in gives a depthwise conv,
    k=1 a pointwise/linear map.  bias is an optional length-c_out vector.
    """
    n, c, h, w = x.data.shape
    c_out, cg, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError("conv2d: only square kernels, got %s" % (weight.data.shape,))
    k = kh
    if c % groups or c_out % groups:
        raise ValueError("conv2d: channels %d/%d not divisible by groups %d"
                         % (c, c_out, groups))
    if cg != c // groups:
        raise ValueError("conv2d: weight shape %s inconsistent with c_in=%d groups=%d"
                         % (weight.data.shape, c, groups))
    if bias is not None and bias.data.shape != (c_out,):
        raise ValueError("conv2d: bias shape %s, expected (%d,)"
                         % (bias.data.shape, c_out))
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: bad stride/pad")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel %d too large for input %sx%s pad %d"
                         % (k, h, w, pad))

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.ascontiguousarray(_im2col(xp, k, stride, ho, wo))

    cog = c_out // groups
    out = np.empty((n, c_out, ho, wo))
    wmat = weight.data.reshape(c_out, cg * k * k)
    for gi in range(groups):
        cols_g = cols[:, gi * cg:(gi + 1) * cg].reshape(n, cg * k * k, ho * wo)
        wg = wmat[gi * cog:(gi + 1) * cog]
        out[:, gi * cog:(gi + 1) * cog] = (wg @ cols_g).reshape(n, cog, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    if _mac_counter["enabled"]:
        _mac_counter["macs"] += n * c_out * ho * wo * cg * k * k

    prev = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gmat = g.reshape(n, c_out, ho * wo)
        if weight.requires_grad:
            dw = np.zeros_like(weight.data)
            dwm = dw.reshape(c_out, cg * k * k)
            for gi in range(groups):
                cols_g = cols[:, gi * cg:(gi + 1) * cg].reshape(n, cg * k * k, ho * wo)
                gg = gmat[:, gi * cog:(gi + 1) * cog]
                dwm[gi * cog:(gi + 1) * cog] += np.tensordot(
                    gg, cols_g, axes=([0, 2], [0, 2]))
            _accum(weight, dw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.empty_like(cols)
            for gi in range(groups):
                wg = wmat[gi * cog:(gi + 1) * cog]
                gg = gmat[:, gi * cog:(gi + 1) * cog]
                dcols[:, gi * cg:(gi + 1) * cg] = (
                    wg.T[None] @ gg).reshape(n, cg, k, k, ho, wo)
            _accum(x, _col2im(dcols, x.data.shape, k, stride, pad, ho, wo))

    return _make(out, prev, back)


def conv2d_direct(x_data, w_data, b_data=None, stride=1, pad=0, groups=1):
    """Loop-based reference convolution on raw arrays (test oracle only)."""
    n, c, h, w = x_data.shape
    c_out, cg, k, _ = w_data.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x_data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cog = c_out // groups
    out = np.zeros((n, c_out, ho, wo))
    for ni in range(n):
        for co in range(c_out):
            gi = co // cog
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, gi * cg:(gi + 1) * cg,
                               i * stride:i * stride + k,
                               j * stride:j * stride + k]
                    out[ni, co, i, j] = np.sum(patch * w_data[co])
    if b_data is not None:
        out += b_data[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# normalization / pooling


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(n,c) plane standardization followed by a per-channel affine."""
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("instance_norm: affine shapes %s/%s, expected (%d,)"
                         % (gamma.data.shape, beta.data.shape, c))
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            m1 = gx.mean(axis=(2, 3), keepdims=True)
            m2 = (gx * xhat).mean(axis=(2, 3), keepdims=True)
            _accum(x, inv_std * (gx - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), back)


def global_avg_pool(x):
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def back(g):
        _accum(x, np.broadcast_to(g / (h * w), x.data.shape))
    return _make(out, (x,), back)


def maxpool2x2(x):
    """2x2/stride-2 max pooling; ties route the gradient to the first max."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2x2 needs even spatial dims, got %dx%d" % (h, w))
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    def back(g):
        dwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=4)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, dx.reshape(n, c, h, w))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# resampling


def _upsample_matrix(n_in, factor):
    """Half-pixel-center (align-corners=false) interpolation weights."""
    n_out = n_in * factor
    a = np.zeros((n_out, n_in))
    for p in range(n_out):
        src = (p + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        a[p, lo] += 1.0 - t
        a[p, hi] += t
    return a


def bilinear_upsample(x, factor):
    if factor < 1:
        raise ValueError("bilinear_upsample: factor must be >= 1")
    if factor == 1:
        def back_id(g):
            _accum(x, g)
        return _make(x.data.copy(), (x,), back_id)
    n, c, h, w = x.data.shape
    ah = _upsample_matrix(h, factor)
    aw = _upsample_matrix(w, factor)
    out = np.einsum("pi,ncij,qj->ncpq", ah, x.data, aw, optimize=True)

    def back(g):
        _accum(x, np.einsum("pi,ncpq,qj->ncij", ah, g, aw, optimize=True))
    return _make(out, (x,), back)


def grid_sample(x, flow):
    """Resample x at p + flow with bilinear interpolation and border clamping.

    flow: (n,2,h,w) tensor; channel 0 is the column offset, channel 1 the row
    offset, both in pixels.  Differentiable w.r.t. x and flow.
    """
    n, c, h, w = x.data.shape
    if flow.data.shape != (n, 2, h, w):
        raise ValueError("grid_sample: flow shape %s, expected %s"
                         % (flow.data.shape, (n, 2, h, w)))
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    xs = jj[None] + flow.data[:, 0]
    ys = ii[None] + flow.data[:, 1]
    in_x = (xs > 0.0) & (xs < w - 1.0)  # clamp zeroes the flow grad outside
    in_y = (ys > 0.0) & (ys < h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xs - x0
    ty = ys - y0

    flat = x.data.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w)
        return np.take_along_axis(
            flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(n, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    w00 = ((1 - ty) * (1 - tx))[:, None]
    w01 = ((1 - ty) * tx)[:, None]
    w10 = (ty * (1 - tx))[:, None]
    w11 = (ty * tx)[:, None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def back(g):
        if x.requires_grad:
            dx = np.zeros((n, c, h * w))
            ni = np.arange(n)[:, None, None]
            ci = np.arange(c)[None, :, None]
            for yi, xi, wt in ((y0, x0, w00), (y0, x1, w01),
                               (y1, x0, w10), (y1, x1, w11)):
                idx = np.broadcast_to((yi * w + xi).reshape(n, 1, h * w),
                                      (n, c, h * w))
                np.add.at(dx, (ni, ci, idx), (g * wt).reshape(n, c, h * w))
            _accum(x, dx.reshape(n, c, h, w))
        if flow.requires_grad:
            dxs = ((1 - ty)[:, None] * (v01 - v00) + ty[:, None] * (v11 - v10))
            dys = ((1 - tx)[:, None] * (v10 - v00) + tx[:, None] * (v11 - v01))
            dflow = np.empty_like(flow.data)
            dflow[:, 0] = (g * dxs).sum(axis=1) * in_x
            dflow[:, 1] = (g * dys).sum(axis=1) * in_y
            _accum(flow, dflow)

    return _make(out, (x, flow), back)


# ---------------------------------------------------------------------------
# shape ops


def concat_c(xs):
    """Concatenate along the channel axis."""
    base = xs[0].data.shape
    for t in xs[1:]:
        n, c, h, w = t.data.shape
        if (n, h, w) != (base[0], base[2], base[3]):
            raise ValueError("concat_c: incompatible shapes %s vs %s"
                             % (base, t.data.shape))
    data = np.concatenate([t.data for t in xs], axis=1)
    widths = [t.data.shape[1] for t in xs]

    def back(g):
        off = 0
        for t, cw in zip(xs, widths):
            _accum(t, g[:, off:off + cw])
            off += cw
    return _make(data, tuple(xs), back)


def slice_c(x, lo, hi):
    """Channel slice x[:, lo:hi]."""
    c = x.data.shape[1]
    if not (0 <= lo < hi <= c):
        raise ValueError("slice_c: bad range [%d,%d) for %d channels" % (lo, hi, c))
    data = x.data[:, lo:hi].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accum(x, full)
    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# parameters


class _Leaf:
    __slots__ = ("name", "tensor", "trainable", "decay")

    def __init__(self, name, tensor, trainable, decay):
        self.name = name
        self.tensor = tensor
        self.trainable = trainable
        self.decay = decay


class Parameters:
    """Named, ordered collection of learnable leaves."""

    def __init__(self):
        self._entries = {}

    def add(self, name, value, trainable=True, decay=True):
        if name in self._entries:
            raise ValueError("duplicate parameter name %r" % name)
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        self._entries[name] = _Leaf(name, t, trainable, decay)
        return t

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self._entries[name].tensor

    def leaves(self):
        return list(self._entries.values())

    def names(self):
        return list(self._entries.keys())

    def zero_grad(self):
        for leaf in self._entries.values():
            leaf.tensor.grad = None

    def count(self):
        return sum(leaf.tensor.data.size for leaf in self._entries.values())


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# finite-difference oracle


class GradCheckError(RuntimeError):
    pass


def grad_check(f, params, eps=1e-5, tol=1e-6, max_coords=8, rng=None):
    """Compare analytic gradients of scalar f(params) with central differences.

    Samples up to max_coords coordinates per leaf.  Returns {name: worst
    relative error}.  Raises GradCheckError if f is non-deterministic.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params.zero_grad()
    out = f()
    out2 = f()
    if not np.array_equal(out.data, out2.data):
        raise GradCheckError("function is non-deterministic at the base point")
    params.zero_grad()
    loss = f()
    loss.backward()
    report = {}
    for leaf in params.leaves():
        if not leaf.trainable:
            continue
        t = leaf.tensor
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        size = t.data.size
        coords = (np.arange(size) if size <= max_coords
                  else rng.choice(size, size=max_coords, replace=False))
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        worst = 0.0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            fp = float(f().data)
            flat[ci] = orig - eps
            fm = float(f().data)
            flat[ci] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[ci] - numeric) / max(1.0, abs(aflat[ci]))
            worst = max(worst, err)
        report[leaf.name] = worst
    params.zero_grad()
    return report
