"""Command-line entry point: ``afterunet {synth,train,eval,predict,bench}``.

Run settings come from three layers, later ones winning: built-in defaults,
a flat ``key=value`` config file (``#`` starts a comment), then command-line
flags.  Every key is a field name of :class:`ModelConfig` or
:class:`TrainConfig`; ``seed`` feeds both.

Exit codes: 0 success, 1 usage or invalid configuration, 2 data or format
error, 3 numeric failure.  Failures print one line to stderr::

    error code=2 kind=format message="..."
"""
import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from . import __version__
from .bench import count_comparisons, format_reports, parse_grid, profile_model
from .errors import AFTError, ConfigError, FormatError
from .losses import evaluate, format_metrics, format_table, predict_volume
from .model import AFTerUNet, ModelConfig
from .training import TrainConfig, fit, load_checkpoint
from .volume import (
    MANIFEST, LabelVolume, Volume, format_manifest, load_dataset, read_volume, synth_scan,
    write_volume,
)

log = logging.getLogger("afterunet")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


# -- run configuration --------------------------------------------------------------

def _parse_ints(text):
    parts = text.replace("x", ",").split(",")
    return tuple(int(p) for p in parts if p.strip())


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {"channels": _parse_ints, "image_size": _parse_ints, "shared_merge": _parse_bool}


def _field_types():
    out = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            out[f.name] = type(f.default)
    return out


RUN_KEYS = _field_types()


def convert(key, value):
    """Parse one textual setting; raises ConfigError naming the key."""
    if key not in RUN_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if key in _PARSERS:
            return _PARSERS[key](value)
        kind = RUN_KEYS[key]
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None


def read_config_file(path):
    settings = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        settings[key] = convert(key, value)
    return settings


def merge_settings(file_settings, flag_settings):
    """Flags override file values; absent keys fall back to dataclass defaults."""
    merged = dict(file_settings)
    merged.update({k: v for k, v in flag_settings.items() if v is not None})
    return merged


def build_configs(settings):
    names_m = {f.name for f in fields(ModelConfig)}
    names_t = {f.name for f in fields(TrainConfig)}
    mkw = {k: v for k, v in settings.items() if k in names_m}
    tkw = {k: v for k, v in settings.items() if k in names_t}
    return ModelConfig(**mkw), TrainConfig(**tkw)


def _add_run_flags(parser):
    group = parser.add_argument_group("run settings (override the config file)")
    for key in RUN_KEYS:
        group.add_argument("--" + key.replace("_", "-"), dest=f"set_{key}", default=None, metavar="V")


def _flag_settings(args):
    return {k: convert(k, getattr(args, f"set_{k}")) for k in RUN_KEYS
            if getattr(args, f"set_{k}", None) is not None}


# -- commands -----------------------------------------------------------------------

def _synth_one(job):
    out, i, dims, classes, seed = job
    img, lab = synth_scan(dims, classes, np.random.default_rng([seed, i]))
    spacing = (2.5, 1.0, 1.0)
    names = (f"scan_{i:03d}_image.aftv", f"scan_{i:03d}_label.aftv")
    write_volume(Volume(img, spacing), os.path.join(out, names[0]))
    write_volume(LabelVolume(lab, spacing), os.path.join(out, names[1]))
    return names


def cmd_synth(args):
    dims = _parse_dims(args.dims)
    if args.scans < 1 or args.classes < 2 or args.workers < 1:
        raise ConfigError("need --scans >= 1, --classes >= 2 and --workers >= 1")
    os.makedirs(args.out, exist_ok=True)
    jobs = [(args.out, i, dims, args.classes, args.seed) for i in range(args.scans)]
    if args.workers == 1:
        names = [_synth_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.workers) as pool:
            names = list(pool.map(_synth_one, jobs))
    with open(os.path.join(args.out, MANIFEST), "w") as fh:
        fh.write(format_manifest([(a, b, dims) for a, b in names]))
    log.info("wrote %d scans to %s", len(names), args.out)
    return 0


def _parse_dims(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"dims must look like HxWxD with positive extents, got {text!r}")
    return dims


def cmd_train(args):
    file_settings = read_config_file(args.config) if args.config else {}
    settings = merge_settings(file_settings, _flag_settings(args))
    dataset = load_dataset(args.data)
    if not dataset:
        raise FormatError(f"{args.data}: manifest lists no scans")
    if "image_size" not in settings:
        settings["image_size"] = dataset[0][1].labels.shape[:2]
    top = max(int(lab.labels.max()) for _, lab in dataset)
    settings.setdefault("num_classes", max(top + 1, 2))
    mcfg, tcfg = build_configs(settings)
    if top >= mcfg.num_classes:
        raise ConfigError(f"num_classes={mcfg.num_classes} but the data holds label {top}")
    for vol, _ in dataset:
        if vol.shape[1:3] != mcfg.image_size:
            raise ConfigError(f"image_size {mcfg.image_size} does not match scan slices {vol.shape[1:3]}")
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.aftc")
    log_path = os.path.join(args.out, "train.log")
    start, opt = 0, None
    if args.resume:
        model, opt, start = load_checkpoint(ckpt, mcfg, tcfg)
        log.info("resuming from %s at epoch %d", ckpt, start)
    else:
        model = AFTerUNet(mcfg)
        if os.path.exists(log_path):
            os.remove(log_path)
    total, parts = model.count_parameters()
    log.info("parameters: %d (%s)", total, ", ".join(f"{k}={v}" for k, v in parts.items()))
    fit(model, dataset, tcfg, opt=opt, start_epoch=start, log_path=log_path,
        checkpoint_path=ckpt, echo=log.info)
    return 0


def cmd_eval(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    result = evaluate(model, load_dataset(args.data))
    print(format_table(result))
    metrics = args.metrics or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "metrics.txt")
    with open(metrics, "w") as fh:
        fh.write(format_metrics(result))
    log.info("metrics written to %s", metrics)
    return 0


def cmd_predict(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    vol = read_volume(args.input)
    if not isinstance(vol, Volume):
        raise FormatError(f"{args.input} is a label volume, expected intensities")
    if vol.shape[0] != model.cfg.in_channels or vol.shape[1:3] != model.cfg.image_size:
        raise FormatError(f"{args.input}: shape {vol.shape} does not fit the model "
                          f"({model.cfg.in_channels} x {model.cfg.image_size})")
    pred = predict_volume(model, vol)
    write_volume(LabelVolume(pred.labels, vol.spacing), args.output)
    log.info("wrote %s with %d slices", args.output, pred.labels.shape[2])
    return 0


def cmd_bench(args):
    grids = [parse_grid(g) for g in args.grids.split(",") if g.strip()]
    if not grids:
        raise ConfigError("--grids is empty")
    reports = [count_comparisons(g, measure_peak=args.measure) for g in grids]
    table = format_reports(reports, heads=args.heads)
    print(table, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for r in reports:
            with open(os.path.join(args.out, "bench_{}x{}x{}.txt".format(*r.grid)), "w") as fh:
                fh.write(r.to_kv())
        with open(os.path.join(args.out, "bench_table.txt"), "w") as fh:
            fh.write(table)
    if args.config:
        mcfg, _ = build_configs(read_config_file(args.config))
        print()
        print(profile_model(mcfg)[1], end="")
    return 0


# -- entry point --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser():
    p = _Parser(prog="afterunet", description="Axial fusion transformer U-Net on CPU.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic scans and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--scans", type=int, default=4)
    s.add_argument("--dims", default="64x64x32", help="HxWxD")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a manifest directory")
    t.add_argument("--config", help="key=value settings file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/model.aftc")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print the DSC table for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", help="metrics file (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one intensity volume")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", dest="output", required=True)
    r.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="attention comparison counts and memory")
    b.add_argument("--grids", default="16x16x8")
    b.add_argument("--heads", type=int, default=8)
    b.add_argument("--out", help="directory for key=value files")
    b.add_argument("--measure", action="store_true", help="also record tracemalloc peaks")
    b.add_argument("--config", help="also profile the model in this config file")
    b.set_defaults(func=cmd_bench)
    return p


def _setup_logging():
    level = os.environ.get("AFT_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"AFT_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    log.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(LOG_LEVELS[level])
    log.propagate = False


def _report(exc, code, kind):
    msg = " ".join(str(exc).split()).replace('"', "'")
    print(f'error code={code} kind={kind} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except AFTError as exc:
        return _report(exc, exc.exit_code, exc.kind)
    except (OSError, KeyError) as exc:
        return _report(exc, 2, "io" if isinstance(exc, OSError) else "format")


if __name__ == "__main__":
    sys.exit(main())
