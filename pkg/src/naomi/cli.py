"""Command-line entry point: simulate, train, impute, eval, schedule.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, masking, metrics
from .io import DataError, DatasetFile, atomic_write_text
from .model import NaomiModel
from .scheduler import FORWARD_PREDICTION, STANDARD, ScheduleError, format_schedule, run_schedule
from .simulator import BilliardsConfig, simulate
from .training import (ConfigError, Dataset, TrainingDiverged, impute_dataset, load_config,
                       train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("naomi")


class UsageError(Exception):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# --- simulate -------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.env != "billiards":
        raise UsageError(f"unknown environment {args.env!r}")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    config = BilliardsConfig(ball_radius=args.radius, speed_min=args.speed_min,
                             speed_max=args.speed_max, timesteps=args.len, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    values = simulate(config, args.n, rng) if args.n else np.zeros((0, args.len, 2))
    meta = {"T": args.len, "D": 2, "simulator": config.to_dict()}
    ids = [f"billiards-{k}" for k in range(args.n)]
    DatasetFile(values, ids, None, meta).save(args.out)
    return EXIT_OK


# --- train ----------------------------------------------------------------

_FLAG_KEYS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr_generator",
    "lr_disc": "lr_discriminator", "R": "resolutions", "hidden_size": "hidden_size",
    "min_missing": "min_missing", "max_missing": "max_missing", "seed": "seed",
    "objective": "objective",
}


def _train_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value if isinstance(value, str) else value
    config = load_config(args.config, overrides)
    if args.variant == "singleres":
        config = baselines.single_res_variant(config)
    return config


def cmd_train(args) -> int:
    config = _train_config(args)
    data = DatasetFile.load(args.data)
    if len(data) == 0:
        raise DataError("training data holds no sequences")
    dataset = Dataset.from_sequences(data.values)
    try:
        result = train(dataset, config, progress=lambda e: log.info("%s", e))
    except TrainingDiverged as e:
        e.state["training"] = dataclasses.asdict(config)
        atomic_write_text(args.model_out, json.dumps(e.state))
        return _fail(EXIT_NUMERIC, f"{e}; last good checkpoint written to {args.model_out}")
    state = result.model.state_dict()
    state["training"] = {**dataclasses.asdict(config), "resolutions": result.model.resolutions,
                         "variant": args.variant}
    atomic_write_text(args.model_out, json.dumps(state))
    log_path = args.loss_log or str(Path(args.model_out).with_suffix(".loss.jsonl"))
    atomic_write_text(log_path, "".join(json.dumps(h) + "\n" for h in result.history))
    return EXIT_OK


# --- impute ---------------------------------------------------------------

def _masks_for(args, data: DatasetFile, rng) -> tuple[np.ndarray, str]:
    T, N = data.T, len(data)
    spec_text = args.mask_spec
    if spec_text is None:
        if data.masks is None:
            raise DataError("data carries no masks; pass --mask-spec")
        return data.masks, args.mode
    if spec_text.startswith("file:"):
        masks = masking.read_mask_file(spec_text[5:])
        if len(masks) != N or any(m.size != T for m in masks):
            raise DataError(f"mask file must hold {N} lines of length {T}")
        return np.stack(masks) if masks else np.zeros((0, T), bool), args.mode
    try:
        spec = masking.parse_mask_spec(spec_text)
        mode = FORWARD_PREDICTION if spec.kind == masking.FORWARD_PREDICTION else args.mode
        return masking.sample_masks(spec, T, N, rng), mode
    except masking.MaskError as e:
        raise UsageError(str(e)) from None


def _load_model(path) -> tuple[NaomiModel, dict]:
    try:
        state = json.loads(Path(path).read_text())
        return NaomiModel.from_state_dict(state), state
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise DataError(f"cannot load model {path}: {e}") from None


def cmd_impute(args) -> int:
    rng = np.random.default_rng(args.seed)
    data = DatasetFile.load(args.data)
    masks, mode = _masks_for(args, data, rng)
    values = data.values
    if args.method in ("naomi", "singleres"):
        if not args.model:
            raise UsageError(f"--method {args.method} needs --model")
        model, state = _load_model(args.model)
        if args.method == "singleres" and model.resolutions != 1:
            raise DataError(f"singleres needs a model trained with R=1; {args.model} has "
                            f"R={model.resolutions}")
        if model.data_dim != data.D:
            raise DataError(f"model expects D={model.data_dim}, data has D={data.D}")
        try:
            out = impute_dataset(model, values, masks, mode, rng) if len(data) else values.copy()
        except ScheduleError as e:
            raise DataError(str(e)) from None
    elif args.method == "linear":
        out = np.stack([baselines.linear_impute(s, m) for s, m in zip(values, masks)]) \
            if len(data) else values.copy()
    elif args.method == "knn":
        if not args.corpus:
            raise UsageError("--method knn needs --corpus")
        corpus = DatasetFile.load(args.corpus)
        index = baselines.KnnIndex(corpus.values, min(args.k, len(corpus)))
        out = np.stack([baselines.knn_impute(index, s, m) for s, m in zip(values, masks)]) \
            if len(data) else values.copy()
    else:
        raise UsageError(f"unknown method {args.method!r}")
    if not np.isfinite(out).all():
        return _fail(EXIT_NUMERIC, "imputation produced non-finite values")
    meta = dict(data.meta)
    meta["imputation"] = {"method": args.method, "mode": mode}
    DatasetFile(out, data.ids, masks, meta).save(args.out)
    return EXIT_OK


# --- eval -----------------------------------------------------------------

def _walls(meta: dict, override: str | None):
    if override:
        try:
            lo, hi = (float(v) for v in override.split(","))
        except ValueError:
            raise UsageError("--walls expects LO,HI") from None
        return lo, hi
    sim = meta.get("simulator") or {}
    r = float(sim.get("ball_radius", 0.0))
    return r, 1.0 - r


def cmd_eval(args) -> int:
    if args.metrics == "all":
        names = list(metrics.ALL_METRICS)
    else:
        names = [n.strip() for n in args.metrics.split(",") if n.strip()]
        unknown = [n for n in names if n not in metrics.ALL_METRICS]
        if unknown:
            raise UsageError(f"unknown metrics {unknown}; valid names: "
                             f"{', '.join(metrics.ALL_METRICS)}")
    pred = DatasetFile.load(args.pred)
    truth = DatasetFile.load(args.truth) if args.truth else None
    if truth is not None and truth.values.shape != pred.values.shape:
        raise DataError(f"pred shape {pred.values.shape} != truth shape {truth.values.shape}")
    if "l2_loss" in names and (truth is None or pred.masks is None):
        if args.metrics != "all":
            raise DataError("l2_loss needs --truth and masks in the prediction file")
        names.remove("l2_loss")
    walls = _walls((truth or pred).meta, args.walls)
    report = metrics.evaluate(pred.values, truth.values if truth else None, pred.masks,
                              names, walls=walls, delta=args.wall_delta)
    if not all(np.isfinite(v) for v in report.values.values()):
        return _fail(EXIT_NUMERIC, "non-finite metric value")
    text = report.to_json() if args.format == "json" else report.to_table()
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


# --- schedule -------------------------------------------------------------

def cmd_schedule(args) -> int:
    try:
        steps = run_schedule(args.mask, args.R, args.mode)
    except ScheduleError as e:
        raise DataError(str(e)) from None
    text = format_schedule(steps, one_based=not args.zero_based)
    if text:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="naomi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate billiards trajectories")
    s.add_argument("--env", default="billiards")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--len", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--radius", type=float, default=0.02)
    s.add_argument("--speed-min", type=float, default=0.01)
    s.add_argument("--speed-max", type=float, default=0.03)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train an imputation model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--objective", choices=("mse", "adversarial"))
    t.add_argument("--variant", choices=("naomi", "singleres"), default="naomi")
    t.add_argument("--model-out", required=True)
    t.add_argument("--loss-log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-disc", dest="lr_disc", type=float)
    t.add_argument("--R", type=int)
    t.add_argument("--hidden-size", dest="hidden_size", type=int)
    t.add_argument("--min-missing", dest="min_missing", type=int)
    t.add_argument("--max-missing", dest="max_missing", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("impute", help="fill missing steps")
    i.add_argument("--model")
    i.add_argument("--method", choices=("naomi", "singleres", "linear", "knn"), default="naomi")
    i.add_argument("--data", required=True)
    i.add_argument("--mask-spec", help="random:MIN:MAX | forward | 0/1 string | file:PATH")
    i.add_argument("--mode", choices=(STANDARD, FORWARD_PREDICTION), default=STANDARD)
    i.add_argument("--corpus", help="training data for --method knn")
    i.add_argument("--k", type=int, default=5)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_impute)

    e = sub.add_parser("eval", help="compute trajectory metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth")
    e.add_argument("--metrics", default="all")
    e.add_argument("--walls", help="LO,HI bounds of the ball centre")
    e.add_argument("--wall-delta", type=float, default=metrics.WALL_DELTA)
    e.add_argument("--format", choices=("json", "table"), default="json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("schedule", help="print the decode order for a mask")
    c.add_argument("--mask", required=True, help="0/1 string, e.g. 100000001")
    c.add_argument("--R", type=int, required=True)
    c.add_argument("--mode", choices=(STANDARD, FORWARD_PREDICTION), default=STANDARD)
    c.add_argument("--zero-based", action="store_true")
    c.set_defaults(func=cmd_schedule)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, masking.MaskError) as e:
        return _fail(EXIT_USAGE, str(e))
    except (DataError, ScheduleError) as e:
        return _fail(EXIT_DATA, str(e))
    except FloatingPointError as e:
        return _fail(EXIT_NUMERIC, str(e))


if __name__ == "__main__":
    sys.exit(main())
