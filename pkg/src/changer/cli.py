"""Command-line surface: changer {train|eval|gradcheck|ablate}.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import config as config_mod
from . import gradchecks
from .config import ConfigError, RunConfig
from .model import CheckpointError, load_checkpoint
from .train import NumericError, evaluate, load_dataset_dir, synth_generate, train_loop

EVAL_SPLIT_OFFSET = 1000003  # synthetic eval split uses seed + this offset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_run_config(args):
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("cannot read config %s: %s" % (args.config, exc))
        cfg = config_mod.parse_config(text)
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError("--set expects key=value, got %r" % item)
        cfg = config_mod.set_key(cfg, key.strip(), val.strip())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _datasets(cfg):
    if cfg.data_dir:
        samples = load_dataset_dir(cfg.data_dir)
        return samples, samples
    train_set = synth_generate(cfg.seed, cfg.train_samples, cfg.image_size,
                               cfg.difficulty)
    eval_set = synth_generate(cfg.seed + EVAL_SPLIT_OFFSET, cfg.eval_samples,
                              cfg.image_size, cfg.difficulty)
    return train_set, eval_set


def _eval_set(cfg):
    if cfg.data_dir:
        return load_dataset_dir(cfg.data_dir)
    return synth_generate(cfg.seed + EVAL_SPLIT_OFFSET, cfg.eval_samples,
                          cfg.image_size, cfg.difficulty)


def cmd_train(args):
    cfg = _load_run_config(args)
    mcfg = config_mod.model_config(cfg)
    tcfg = config_mod.train_config(cfg)
    train_set, eval_set = _datasets(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "log.csv")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    with open(os.path.join(cfg.out_dir, "config.cfg"), "w") as fh:
        fh.write(config_mod.serialize_config(cfg))
    model, _, report = train_loop(mcfg, tcfg, train_set, eval_set,
                                  log_path=log_path, checkpoint_path=ckpt_path)
    if report is None:
        report = evaluate(model, eval_set)
    print("variant=%s iters=%d params=%d P=%r R=%r F1=%r"
          % (mcfg.variant, tcfg.max_iters, model.param_count(),
             report.precision, report.recall, report.f1))
    return 0


def cmd_eval(args):
    cfg = _load_run_config(args)
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, _eval_set(cfg))
    print("P=%r R=%r F1=%r" % (report.precision, report.recall, report.f1))
    return 0


def cmd_gradcheck(args):
    try:
        results = gradchecks.run_checks(args.scope, seed=args.seed or 0,
                                        tol=args.tol)
    except KeyError as exc:
        raise ConfigError(str(exc))
    failed = False
    for name, worst, tol, ok in results:
        print("%-14s worst_rel_err=%.3e tol=%.0e %s"
              % (name, worst, tol, "pass" if ok else "FAIL"))
        failed = failed or not ok
    if failed:
        raise NumericError("gradient check failed")
    return 0


# Ablation grids, in declared order (Tables of stage subsets, exchange
# ratios 1/2..1/32, spatial windows 1x1..8x8).
STAGE_SUBSETS = [((4,), "4"), ((3, 4), "3-4"), ((2, 3, 4), "2-4"),
                 ((1, 2, 3, 4), "1-4")]
RATIO_GRID = [(2, "1/2"), (4, "1/4"), (8, "1/8"), (16, "1/16"), (32, "1/32")]
WINDOW_GRID = [(1, "1x1"), (2, "2x2"), (4, "4x4"), (8, "8x8")]


def _ablate_points(axis, cfg):
    points = []
    if axis == "ratio":
        for p, label in RATIO_GRID:
            points.append((label, replace(cfg, variant="ex", exchange_p=p)))
    elif axis == "window":
        for wsize, label in WINDOW_GRID:
            points.append((label, replace(cfg, variant="ex", spatial_window=wsize)))
    elif axis == "stage":
        kind = {"channel": "channel_ex", "spatial": "spatial_ex",
                "ad": "ad"}.get(cfg.ablate_kind)
        if kind is None:
            raise ConfigError("ablate_kind must be channel, spatial or ad, got %r"
                              % cfg.ablate_kind)
        for subset, label in STAGE_SUBSETS:
            sched = {("stage%d_interact" % s): (kind if s in subset else "none")
                     for s in range(1, 5)}
            points.append((label, replace(cfg, variant="ex", fusion="fdaf",
                                          **sched)))
    else:
        raise ConfigError("unknown ablation axis %r" % axis)
    return points


def _ablate_worker(arg):
    label, cfg_text = arg
    cfg = config_mod.parse_config(cfg_text)
    mcfg = config_mod.model_config(cfg)
    tcfg = config_mod.train_config(cfg)
    train_set, eval_set = _datasets(cfg)
    model, _, report = train_loop(mcfg, tcfg, train_set, eval_set)
    if report is None:
        report = evaluate(model, eval_set)
    return label, report.precision, report.recall, report.f1


def cmd_ablate(args):
    cfg = _load_run_config(args)
    points = _ablate_points(args.axis, cfg)
    jobs = [(label, config_mod.serialize_config(c)) for label, c in points]
    threads = int(os.environ.get("CHANGER_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_ablate_worker, jobs))
    else:
        results = [_ablate_worker(job) for job in jobs]
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "ablate_%s.csv" % args.axis)
    new_file = not os.path.exists(out_path)
    with open(out_path, "a") as fh:
        if new_file:
            fh.write("setting,precision,recall,f1\n")
        for label, p, r, f1 in results:
            line = "%s,%r,%r,%r" % (label, p, r, f1)
            fh.write(line + "\n")
            print(line)
    return 0


def build_parser():
    parser = _Parser(prog="changer")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", default=None)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", default=None, metavar="DIR")

    sp = sub.add_parser("train")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval")
    sp.add_argument("--checkpoint", required=True)
    common(sp, out=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck")
    sp.add_argument("scope", nargs="?", default="all")
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate")
    sp.add_argument("axis", choices=["stage", "ratio", "window"])
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
