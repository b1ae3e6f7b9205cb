"""Command-line entry point: ``segqual <command> [options]``.

Values resolve in order: built-in defaults, then an optional JSON file given
with ``--config``, then explicit flags. ``SEGQUAL_SEED`` supplies the seed
when neither the file nor the flags set one.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error,
4 training divergence, 5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import DataConfig, gen_dataset, load_dataset
from .errors import (ArtifactMismatchError, DatasetError, InvalidInputError, ModelFormatError,
                     SegQualError, TrainingDivergedError)
from .evaluate import (benchmark, flag_low, records_from, scatter_export, scatter_import,
                       selection_report, summary, with_oracle)
from .regressor import (Architecture, TrainConfig, gradient_check, load, param_count,
                        predict_tuples, save, train)
from .theory import reconstruction_trials

log = logging.getLogger("segqual")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = range(6)

DEFAULTS = {
    "gen-data": {"out": None, "n": 50, "objects": 1, "profiles": "good,medium,poor",
                 "seed": 0, "image_size": 96, "jitter": 0.05},
    "train": {"data": None, "out": None, "history": None, "epochs": 30, "lr": 1e-4,
              "batch": 32, "input_side": 244, "heads": 1, "widths": "8,16,32,64",
              "weight_decay": 0.01, "head_weights": "1.0,1.0", "val_fraction": 0.0, "seed": 0},
    "eval": {"model": None, "data": None, "out_dir": None, "input_side": None,
             "oracle": False, "priority": None},
    "flag": {"records": None, "threshold": None, "percentile": None, "out": None},
    "benchmark": {"records": None, "out": None},
    "select": {"records": None, "oracle": False, "priority": None, "out": None},
    "grad-check": {"seed": 0, "widths": "4,8,8", "input_side": 16, "heads": 2, "tol": 1e-4},
    "reconstruct-demo": {"size": 16, "trials": 20, "noise": 0.0, "seed": 0},
}
REQUIRED = {
    "gen-data": ["out"],
    "train": ["data", "out"],
    "eval": ["data", "out_dir"],
    "flag": ["records"],
    "benchmark": ["records"],
    "select": ["records"],
}


class ConfigError(Exception):
    pass


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v)


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v)


def _names(text) -> list[str] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v for v in str(text).split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="segqual", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"segqual {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", help="JSON file with option values")
        return sp

    g = cmd("gen-data", "generate a synthetic dataset with mock segmenters")
    g.add_argument("--out", help="output directory")
    g.add_argument("--n", type=int, help="number of images")
    g.add_argument("--objects", type=int, help="objects per image")
    g.add_argument("--profiles", help="comma-separated segmenter profiles")
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--jitter", type=float, help="prompt jitter as a fraction of box size")

    t = cmd("train", "train the quality regressor")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="model file to write")
    t.add_argument("--history", help="per-epoch history CSV (default: <out>.history.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--input-side", dest="input_side", type=int)
    t.add_argument("--heads", type=int, choices=(1, 2))
    t.add_argument("--widths", help="comma-separated conv widths")
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--head-weights", dest="head_weights")
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--seed", type=int)

    e = cmd("eval", "predict on a dataset; write scatter CSV and summary JSON")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--out-dir", dest="out_dir")
    e.add_argument("--input-side", dest="input_side", type=int,
                   help="expected model input side; a mismatch aborts")
    e.add_argument("--oracle", action="store_true", help="use true dice as the prediction")
    e.add_argument("--priority", help="segmenter tie-break order")

    f = cmd("flag", "list low-quality records")
    f.add_argument("--records", help="scatter CSV from eval")
    pol = f.add_mutually_exclusive_group()
    pol.add_argument("--threshold", type=float)
    pol.add_argument("--percentile", type=float)
    f.add_argument("--out")

    b = cmd("benchmark", "rank segmenters by mean predicted dice")
    b.add_argument("--records")
    b.add_argument("--out")

    s = cmd("select", "sample-wise model selection report")
    s.add_argument("--records")
    s.add_argument("--oracle", action="store_true")
    s.add_argument("--priority")
    s.add_argument("--out")

    gc = cmd("grad-check", "compare analytic and finite-difference gradients")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--widths")
    gc.add_argument("--input-side", dest="input_side", type=int)
    gc.add_argument("--heads", type=int, choices=(1, 2))
    gc.add_argument("--tol", type=float)

    r = cmd("reconstruct-demo", "recover hidden masks from paired evaluator queries")
    r.add_argument("--size", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--noise", type=float, help="std of Gaussian noise added to oracle answers")
    r.add_argument("--seed", type=int)
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    seed_given = False
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(doc)
        seed_given = "seed" in doc
    flags = {k: v for k, v in vars(ns).items() if k in cfg}
    cfg.update(flags)
    seed_given = seed_given or "seed" in flags
    if "seed" in cfg and not seed_given and os.environ.get("SEGQUAL_SEED"):
        try:
            cfg["seed"] = int(os.environ["SEGQUAL_SEED"])
        except ValueError as exc:
            raise ConfigError(f"SEGQUAL_SEED must be an integer, got {os.environ['SEGQUAL_SEED']!r}") from exc
    for key in REQUIRED.get(command, []):
        if cfg.get(key) in (None, ""):
            raise ConfigError(f"{command}: --{key.replace('_', '-')} is required")
    return cfg


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=True)
    if out:
        try:
            Path(out).write_text(text + "\n")
        except OSError as exc:
            raise DatasetError(f"cannot write {out}: {exc.strerror}") from exc
        print(out)
    else:
        print(text)


def _report(cfg: dict, **body) -> dict:
    return {"version": __version__, "config": cfg, **body}


def cmd_gen_data(cfg: dict) -> int:
    config = DataConfig(n_images=int(cfg["n"]), objects_per_image=int(cfg["objects"]),
                        profiles=tuple(_names(cfg["profiles"])), seed=int(cfg["seed"]),
                        image_size=int(cfg["image_size"]), jitter=float(cfg["jitter"]))
    try:
        config.validate()
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = gen_dataset(config, cfg["out"])
    print(Path(cfg["out"]) / "manifest.json")
    log.info("%d tuples, M=%d", len(manifest.tuples), manifest.M)
    return EXIT_OK


def split_by_sample(tuples, fraction: float, seed: int):
    """Hold out a seeded ``fraction`` of images (all their tuples) for validation."""
    ids = sorted({t.sample_id for t in tuples})
    n_val = int(round(fraction * len(ids)))
    if n_val == 0:
        return list(tuples), []
    perm = np.random.default_rng([seed, 3]).permutation(len(ids))
    held = {ids[i] for i in perm[:n_val]}
    return ([t for t in tuples if t.sample_id not in held], [t for t in tuples if t.sample_id in held])


def _train_config(cfg: dict) -> TrainConfig:
    try:
        config = TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch"]),
                             epochs=int(cfg["epochs"]), weight_decay=float(cfg["weight_decay"]),
                             seed=int(cfg["seed"]), head_weights=_floats(cfg["head_weights"]),
                             widths=_ints(cfg["widths"]), heads=int(cfg["heads"]),
                             input_side=int(cfg["input_side"]))
        config.validate()
        if not 0.0 <= float(cfg["val_fraction"]) < 1.0:
            raise InvalidInputError("val_fraction must lie in [0, 1)")
    except (InvalidInputError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def cmd_train(cfg: dict) -> int:
    config = _train_config(cfg)
    manifest = load_dataset(cfg["data"])
    tr, val = split_by_sample(manifest.tuples, float(cfg["val_fraction"]), config.seed)
    state, history = train(tr, config, val=val or None)
    out = Path(cfg["out"])
    hist_path = Path(cfg["history"]) if cfg["history"] else out.with_name(out.name + ".history.csv")
    try:
        save(state, out)
        with open(hist_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_spearman"])
            for rec in history:
                w.writerow([rec["epoch"], repr(rec["train_loss"]),
                            repr(rec["val_spearman"]) if "val_spearman" in rec else ""])
    except OSError as exc:
        raise DatasetError(f"cannot write training artifacts: {exc}") from exc
    _emit(_report(cfg, model=str(out), history=str(hist_path), train_tuples=len(tr),
                  val_tuples=len(val), final=history[-1] if history else None), None)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    manifest = load_dataset(cfg["data"])
    tuples = manifest.tuples
    if cfg["oracle"]:
        records = with_oracle(records_from(tuples, np.zeros((len(tuples), 1))))
    else:
        if not cfg["model"]:
            raise ConfigError("eval: --model is required unless --oracle is given")
        state = load(cfg["model"])
        side = cfg["input_side"]
        if side is not None and int(side) != state.arch.input_side:
            raise ArtifactMismatchError(
                f"model expects input side {state.arch.input_side}, flags say {side}")
        records = records_from(tuples, predict_tuples(state, tuples))
    out_dir = Path(cfg["out_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        scatter_export(records, out_dir / "scatter.csv")
    except OSError as exc:
        raise DatasetError(f"cannot write to {out_dir}: {exc}") from exc
    report = _report(cfg, **summary(records, _names(cfg["priority"])))
    _emit(report, str(out_dir / "summary.json"))
    return EXIT_OK


def _records(cfg: dict):
    try:
        return scatter_import(cfg["records"])
    except OSError as exc:
        raise DatasetError(f"cannot read {cfg['records']}: {exc.strerror}") from exc


def cmd_flag(cfg: dict) -> int:
    records = _records(cfg)
    if (cfg["threshold"] is None) == (cfg["percentile"] is None):
        raise ConfigError("flag: give exactly one of --threshold or --percentile")
    try:
        keys = flag_low(records, threshold=cfg["threshold"], percentile=cfg["percentile"])
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    flagged = [{"sample_id": s, "object_id": j, "segmenter_id": m} for s, j, m in keys]
    _emit(_report(cfg, total=len(records), count=len(flagged), flagged=flagged), cfg["out"])
    return EXIT_OK


def cmd_benchmark(cfg: dict) -> int:
    records = _records(cfg)
    _emit(_report(cfg, ranking=benchmark(records)), cfg["out"])
    return EXIT_OK


def cmd_select(cfg: dict) -> int:
    records = _records(cfg)
    if cfg["oracle"]:
        records = with_oracle(records)
    report = selection_report(records, _names(cfg["priority"]))
    _emit(_report(cfg, **report), cfg["out"])
    return EXIT_OK


def cmd_grad_check(cfg: dict) -> int:
    try:
        arch = Architecture(_ints(cfg["widths"]), int(cfg["heads"]), int(cfg["input_side"]))
        arch.validate()
    except (InvalidInputError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    check = gradient_check(arch, seed=int(cfg["seed"]))
    passed = check.max_relative_error < float(cfg["tol"])
    _emit(_report(cfg, parameters=param_count(arch), max_relative_error=check.max_relative_error,
                  compared=check.compared, kinked=check.kinked, passed=passed), None)
    return EXIT_OK if passed else EXIT_CHECK


def cmd_reconstruct_demo(cfg: dict) -> int:
    if int(cfg["size"]) < 1 or int(cfg["trials"]) < 1 or float(cfg["noise"]) < 0:
        raise ConfigError("size and trials must be >= 1 and noise >= 0")
    result = reconstruction_trials(int(cfg["size"]), int(cfg["trials"]), float(cfg["noise"]),
                                   int(cfg["seed"]))
    _emit(_report(cfg, **result), None)
    return EXIT_OK if result["passed"] else EXIT_CHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "flag": cmd_flag,
    "benchmark": cmd_benchmark,
    "select": cmd_select,
    "grad-check": cmd_grad_check,
    "reconstruct-demo": cmd_reconstruct_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"segqual {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"segqual: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArtifactMismatchError as exc:
        print(f"segqual: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DatasetError, ModelFormatError, OSError) as exc:
        print(f"segqual: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidInputError as exc:
        print(f"segqual: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SegQualError as exc:
        print(f"segqual: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
