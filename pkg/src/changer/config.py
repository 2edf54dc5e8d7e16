"""Flat `key = value` run configuration: model + training + data source.

Dotted keys express nesting (e.g. `stage2.interact = spatial_ex`).  Parsing
and serialization are exact inverses, so configs round-trip losslessly.
"""

from dataclasses import dataclass, fields, replace

from .model import config_for_variant
from .train import TrainConfig

AUTO = "auto"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    variant: str = "ex"
    widths: tuple = (16, 32, 64, 128)
    decoder_dim: int = 32
    fusion: str = AUTO
    stage1_interact: str = AUTO
    stage2_interact: str = AUTO
    stage3_interact: str = AUTO
    stage4_interact: str = AUTO
    exchange_p: int = 2
    spatial_window: int = 1
    ad_ratio: int = 4
    # training
    lr0: float = 0.001
    weight_decay: float = 0.05
    max_iters: int = 2000
    batch_size: int = 4
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eval_interval: int = 500
    aug_flip: bool = True
    aug_photometric: bool = True
    aug_swap: bool = True
    aug_crop: bool = False
    crop_size: int = 64
    # data / run
    seed: int = 0
    image_size: int = 64
    train_samples: int = 200
    eval_samples: int = 50
    difficulty: float = 1.0
    data_dir: str = ""
    out_dir: str = "runs/default"
    ablate_kind: str = "channel"


# config-file key -> dataclass attribute
_KEY_TO_ATTR = {}
for f in fields(RunConfig):
    if f.name.startswith("stage") and f.name.endswith("_interact"):
        _KEY_TO_ATTR[f.name.replace("_interact", ".interact")] = f.name
    else:
        _KEY_TO_ATTR[f.name] = f.name
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}
# field types inferred from the defaults (every field has one)
_FIELD_TYPES = {f.name: type(getattr(RunConfig(), f.name))
                for f in fields(RunConfig)}


def _parse_value(attr, raw):
    ftype = _FIELD_TYPES[attr]
    try:
        if ftype is tuple:
            return tuple(int(e) for e in raw.split(","))
        if ftype is bool:
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError("bad value %r for key %r" % (raw, _ATTR_TO_KEY[attr]))


def _format_value(attr, value):
    if isinstance(value, tuple):
        return ",".join(str(e) for e in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_key(cfg, key, raw):
    if key not in _KEY_TO_ATTR:
        raise ConfigError("unknown config key %r" % key)
    attr = _KEY_TO_ATTR[key]
    return replace(cfg, **{attr: _parse_value(attr, raw)})


def parse_config(text, base=None):
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError("line %d: expected key = value, got %r"
                              % (lineno, line))
        cfg = set_key(cfg, key.strip(), val.strip())
    return cfg


def serialize_config(cfg):
    lines = []
    for f in fields(RunConfig):
        key = _ATTR_TO_KEY[f.name]
        lines.append("%s = %s" % (key, _format_value(f.name, getattr(cfg, f.name))))
    return "\n".join(lines) + "\n"


def model_config(cfg):
    """Resolve the run config into a ModelConfig, expanding `auto` fields
    from the variant table."""
    stages = (cfg.stage1_interact, cfg.stage2_interact,
              cfg.stage3_interact, cfg.stage4_interact)
    try:
        base = config_for_variant(cfg.variant)
        resolved = tuple(base.stage_interacts[i] if s == AUTO else s
                         for i, s in enumerate(stages))
        fusion = base.fusion if cfg.fusion == AUTO else cfg.fusion
        return config_for_variant(
            cfg.variant, exchange_p=cfg.exchange_p,
            spatial_window=cfg.spatial_window, init_seed=cfg.seed,
            widths=cfg.widths, decoder_dim=cfg.decoder_dim,
            stage_interacts=resolved, fusion=fusion, ad_ratio=cfg.ad_ratio)
    except ValueError as exc:
        raise ConfigError(str(exc))


def train_config(cfg):
    return TrainConfig(
        lr0=cfg.lr0, weight_decay=cfg.weight_decay, max_iters=cfg.max_iters,
        batch_size=cfg.batch_size, poly_power=cfg.poly_power, beta1=cfg.beta1,
        beta2=cfg.beta2, seed=cfg.seed, eval_interval=cfg.eval_interval,
        aug_flip=cfg.aug_flip, aug_photometric=cfg.aug_photometric,
        aug_swap=cfg.aug_swap, aug_crop=cfg.aug_crop, crop_size=cfg.crop_size)
