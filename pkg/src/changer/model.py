"""MetaChanger assembly: weight-shared hierarchical encoder with a per-stage
interaction schedule, lightweight MLP decoder, and fusion + projection head.

One parameter set serves both temporal branches (a single stored copy, applied
twice), so the siamese weight-sharing claim holds by construction.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import fusion as fusion_mod
from . import interact as interact_mod
from .tensor import (Parameters, Tensor, add, bilinear_upsample, concat_c,
                     conv2d, instance_norm, kaiming_uniform,
                     mac_counter_reset, mac_counter_stop, maxpool2x2, relu)

VARIANTS = ("vanilla", "align", "ad", "ex")
INTERACT_KINDS = ("none", "ad", "channel_ex", "spatial_ex")

MAGIC = b"CHGRCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "ex"
    widths: tuple = (16, 32, 64, 128)
    blocks: int = 2
    decoder_dim: int = 32
    fusion: str = "fdaf"
    stage_interacts: tuple = ("none", "spatial_ex", "channel_ex", "channel_ex")
    exchange_p: int = 2
    spatial_window: int = 1
    ad_ratio: int = 4
    init_seed: int = 0


# Variant table: vanilla = no interaction + concat; align = no interaction +
# FDAF; ad = AD at stages 2-4 + FDAF; ex = spatial exchange at stage 2 and
# channel exchange at stages 3-4 + FDAF.
_VARIANT_SCHEDULES = {
    "vanilla": (("none",) * 4, "concat"),
    "align": (("none",) * 4, "fdaf"),
    "ad": (("none", "ad", "ad", "ad"), "fdaf"),
    "ex": (("none", "spatial_ex", "channel_ex", "channel_ex"), "fdaf"),
}


def config_for_variant(variant, exchange_p=2, spatial_window=1, init_seed=0,
                       widths=(16, 32, 64, 128), decoder_dim=32,
                       stage_interacts=None, fusion=None, ad_ratio=4):
    if variant not in VARIANTS:
        raise ValueError("unknown variant %r (choose from %s)" % (variant, VARIANTS))
    sched, fuse = _VARIANT_SCHEDULES[variant]
    if stage_interacts is not None:
        sched = tuple(stage_interacts)
    if fusion is not None:
        fuse = fusion
    for kind in sched:
        if kind not in INTERACT_KINDS:
            raise ValueError("unknown interact kind %r" % kind)
    return ModelConfig(variant=variant, widths=tuple(widths),
                       decoder_dim=decoder_dim, fusion=fuse,
                       stage_interacts=sched, exchange_p=exchange_p,
                       spatial_window=spatial_window, ad_ratio=ad_ratio,
                       init_seed=init_seed)


def _conv_param(params, rng, name, c_out, c_in, k):
    fan_in = c_in * k * k
    return params.add(name, kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))


def _norm_params(params, name, c):
    gamma = params.add(name + ".gamma", np.ones(c), decay=False)
    beta = params.add(name + ".beta", np.zeros(c), decay=False)
    return gamma, beta


class ChangerModel:
    """Siamese encoder-decoder with configurable interaction and fusion."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.params = Parameters()
        rng = np.random.default_rng(cfg.init_seed)
        p = self.params
        w = cfg.widths

        _conv_param(p, rng, "stem.conv.w", w[0], 3, 3)
        _norm_params(p, "stem.norm", w[0])

        self._blocks = []  # per stage: list of (names..., stride, has_down)
        c_in = w[0]
        for si in range(4):
            c_out = w[si]
            stage_blocks = []
            for bi in range(cfg.blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                base = "stage%d.block%d" % (si + 1, bi)
                _conv_param(p, rng, base + ".conv1.w", c_out, c_in, 3)
                _norm_params(p, base + ".norm1", c_out)
                _conv_param(p, rng, base + ".conv2.w", c_out, c_out, 3)
                _norm_params(p, base + ".norm2", c_out)
                has_down = stride != 1 or c_in != c_out
                if has_down:
                    _conv_param(p, rng, base + ".down.w", c_out, c_in, 1)
                    _norm_params(p, base + ".downnorm", c_out)
                stage_blocks.append((base, stride, has_down))
                c_in = c_out
            self._blocks.append(stage_blocks)

        self._ad = [None] * 4
        for si in range(4):
            if cfg.stage_interacts[si] == "ad":
                self._ad[si] = interact_mod.make_ad_params(
                    p, "interact%d" % (si + 1), w[si], r=cfg.ad_ratio, rng=rng)

        dim = cfg.decoder_dim
        for si in range(4):
            _conv_param(p, rng, "decoder.lin%d.w" % (si + 1), dim, w[si], 1)
            p.add("decoder.lin%d.b" % (si + 1), np.zeros(dim), decay=False)
        _conv_param(p, rng, "decoder.fuse.w", dim, 4 * dim, 1)
        p.add("decoder.fuse.b", np.zeros(dim), decay=False)

        self._fdaf = None
        if cfg.fusion == "fdaf":
            self._fdaf = fusion_mod.make_fdaf_params(p, "fdaf", dim, rng=rng)
        elif cfg.fusion != "concat":
            raise ValueError("unknown fusion %r" % cfg.fusion)

        _conv_param(p, rng, "head.conv1.w", dim, 2 * dim, 3)
        p.add("head.conv1.b", np.zeros(dim), decay=False)
        _conv_param(p, rng, "head.conv2.w", 2, dim, 1)
        p.add("head.conv2.b", np.zeros(2), decay=False)

    # -- encoder ----------------------------------------------------------

    def _block_forward(self, x, base, stride, has_down):
        p = self.params
        z = conv2d(x, p[base + ".conv1.w"], stride=stride, pad=1)
        z = instance_norm(z, p[base + ".norm1.gamma"], p[base + ".norm1.beta"])
        z = relu(z)
        z = conv2d(z, p[base + ".conv2.w"], stride=1, pad=1)
        z = instance_norm(z, p[base + ".norm2.gamma"], p[base + ".norm2.beta"])
        if has_down:
            skip = conv2d(x, p[base + ".down.w"], stride=stride)
            skip = instance_norm(skip, p[base + ".downnorm.gamma"],
                                 p[base + ".downnorm.beta"])
        else:
            skip = x
        return relu(add(z, skip))

    def _stem(self, x):
        p = self.params
        z = conv2d(x, p["stem.conv.w"], stride=2, pad=1)
        z = instance_norm(z, p["stem.norm.gamma"], p["stem.norm.beta"])
        return maxpool2x2(relu(z))

    def _interact(self, si, f0, f1):
        kind = self.cfg.stage_interacts[si]
        if kind == "none":
            return interact_mod.identity_interact(f0, f1)
        if kind == "ad":
            return interact_mod.ad_interact(f0, f1, self._ad[si])
        if kind == "channel_ex":
            mask = interact_mod.make_channel_mask(f0.data.shape[1],
                                                  self.cfg.exchange_p)
            return interact_mod.exchange(f0, f1, mask)
        if kind == "spatial_ex":
            mask = interact_mod.make_spatial_mask(f0.data.shape[3],
                                                  self.cfg.exchange_p,
                                                  self.cfg.spatial_window)
            return interact_mod.exchange(f0, f1, mask)
        raise ValueError("unknown interact kind %r" % kind)

    def encoder_forward(self, x0, x1):
        """Returns the two 4-level feature pyramids (strides 4, 8, 16, 32)."""
        for x in (x0, x1):
            n, c, h, w = x.data.shape
            if c != 3:
                raise ValueError("encoder expects 3 input channels, got %d" % c)
            if h % 32 or w % 32:
                raise ValueError("input size %dx%d not divisible by 32" % (h, w))
        f0, f1 = self._stem(x0), self._stem(x1)
        pyr0, pyr1 = [], []
        for si in range(4):
            for (base, stride, has_down) in self._blocks[si]:
                f0 = self._block_forward(f0, base, stride, has_down)
                f1 = self._block_forward(f1, base, stride, has_down)
            f0, f1 = self._interact(si, f0, f1)
            pyr0.append(f0)
            pyr1.append(f1)
        return pyr0, pyr1

    # -- decoder ----------------------------------------------------------

    def decoder_forward(self, pyramid):
        """Per-level linear map to decoder_dim, upsample to 1/4 scale, concat,
        and project 4C -> C.  Shared weights across branches."""
        if len(pyramid) != 4:
            raise ValueError("decoder expects a 4-level pyramid")
        p = self.params
        lifted = []
        for si, f in enumerate(pyramid):
            z = conv2d(f, p["decoder.lin%d.w" % (si + 1)],
                       p["decoder.lin%d.b" % (si + 1)])
            lifted.append(bilinear_upsample(z, 2 ** si))
        z = concat_c(lifted)
        return conv2d(z, p["decoder.fuse.w"], p["decoder.fuse.b"])

    # -- head -------------------------------------------------------------

    def fuse(self, f0, f1):
        if self.cfg.fusion == "fdaf":
            return fusion_mod.fdaf_fuse(f0, f1, self._fdaf)
        return fusion_mod.concat_fuse(f0, f1)

    def head_forward(self, f0, f1):
        p = self.params
        z = self.fuse(f0, f1)
        z = relu(conv2d(z, p["head.conv1.w"], p["head.conv1.b"], pad=1))
        z = conv2d(z, p["head.conv2.w"], p["head.conv2.b"])
        return bilinear_upsample(z, 4)

    def forward(self, x0, x1):
        """Full model: (n,3,H,W) pair -> change logits (n,2,H,W)."""
        if not isinstance(x0, Tensor):
            x0 = Tensor(x0)
        if not isinstance(x1, Tensor):
            x1 = Tensor(x1)
        pyr0, pyr1 = self.encoder_forward(x0, x1)
        f0 = self.decoder_forward(pyr0)
        f1 = self.decoder_forward(pyr1)
        return self.head_forward(f0, f1)

    def param_count(self):
        return self.params.count()


def param_count(model):
    return model.param_count()


def mac_count(cfg, size, batch=1):
    """Analytic multiply-accumulate total for one forward pass, counted over
    conv kernels (n*c_out*h_out*w_out*(c_in/groups)*k^2 per conv)."""
    model = ChangerModel(cfg)
    x = Tensor(np.zeros((batch, 3, size, size)))
    mac_counter_reset()
    try:
        model.forward(x, x)
    finally:
        macs = mac_counter_stop()
    return macs


# ---------------------------------------------------------------------------
# checkpoint i/o


class CheckpointError(RuntimeError):
    pass


_CFG_FIELDS = ("variant", "widths", "blocks", "decoder_dim", "fusion",
               "stage_interacts", "exchange_p", "spatial_window", "ad_ratio",
               "init_seed")


def config_to_text(cfg):
    lines = []
    for name in _CFG_FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(e) for e in v)
        lines.append("%s = %s" % (name, v))
    return "\n".join(lines) + "\n"


def config_from_text(text):
    kv = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    unknown = set(kv) - set(_CFG_FIELDS)
    if unknown:
        raise CheckpointError("unknown model config keys: %s" % sorted(unknown))
    missing = set(_CFG_FIELDS) - set(kv)
    if missing:
        raise CheckpointError("missing model config keys: %s" % sorted(missing))
    return ModelConfig(
        variant=kv["variant"],
        widths=tuple(int(e) for e in kv["widths"].split(",")),
        blocks=int(kv["blocks"]),
        decoder_dim=int(kv["decoder_dim"]),
        fusion=kv["fusion"],
        stage_interacts=tuple(kv["stage_interacts"].split(",")),
        exchange_p=int(kv["exchange_p"]),
        spatial_window=int(kv["spatial_window"]),
        ad_ratio=int(kv["ad_ratio"]),
        init_seed=int(kv["init_seed"]))


def save_checkpoint(path, model):
    """Flat named-leaf binary format; round-trips bit-exactly."""
    header = config_to_text(model.cfg).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        leaves = model.params.leaves()
        fh.write(struct.pack("<I", len(leaves)))
        for leaf in leaves:
            name = leaf.name.encode()
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            shape = leaf.tensor.data.shape
            fh.write(struct.pack("<I", len(shape)))
            for d in shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(leaf.tensor.data,
                                          dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad checkpoint magic in %s" % path)
    off = len(MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError("truncated checkpoint %s" % path)
        chunk = raw[off:off + n]
        off += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    cfg = config_from_text(take(u32()).decode())
    model = ChangerModel(cfg)
    nleaves = u32()
    leaves = model.params.leaves()
    if nleaves != len(leaves):
        raise CheckpointError("checkpoint has %d leaves, config builds %d"
                              % (nleaves, len(leaves)))
    for leaf in leaves:
        name = take(u32()).decode()
        if name != leaf.name:
            raise CheckpointError("leaf order mismatch: %r vs %r"
                                  % (name, leaf.name))
        shape = tuple(u32() for _ in range(u32()))
        if shape != leaf.tensor.data.shape:
            raise CheckpointError("shape mismatch for %s: %s vs %s"
                                  % (name, shape, leaf.tensor.data.shape))
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(take(8 * count), dtype="<f8")
        leaf.tensor.data = vals.reshape(shape).astype(np.float64)
    if off != len(raw):
        raise CheckpointError("trailing bytes in checkpoint %s" % path)
    return model
