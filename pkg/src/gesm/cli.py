"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Set GESM_LOG_LEVEL
(DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from functools import partial
from pathlib import Path

import numpy as np

from . import data
from .data import SplitSpec
from .model import EVAL, GesmParams, forward, init_params
from .trainer import PRESETS, GesmConfig, PreparedGraph, evaluate, run_seeds, substream, train

log = logging.getLogger("gesm")

LAYERS = ("pre-propagation", "pre-softmax")


class UsageError(Exception):
    pass


def _parse_list(text: str, cast=int) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def _split_counts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--val-count", type=int, default=500, help="validation nodes in label-rate splits")
    p.add_argument("--test-count", type=int, default=1000, help="test nodes in label-rate splits")


def _rate_split(args, rate: float, seed: int) -> SplitSpec:
    return SplitSpec(mode=data.LABEL_RATE, rate=rate, val_count=args.val_count,
                     test_count=args.test_count, seed=seed)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", required=True, help="dataset container (.gesm binary or .json)")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=("base", "att", "full"))
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="gesm", description="Step-mixture graph network experiments")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train, report, save parameters")
    t.add_argument("--seeds", type=int, default=1, help="number of seeded runs")
    t.add_argument("--label-rate", type=float, help="re-split each run at this label rate")
    _split_counts(t)

    e = sub.add_parser("eval", parents=[common], help="evaluate saved parameters")
    e.add_argument("--params", required=True)
    e.add_argument("--mask", choices=("train", "val", "test"), default="test")

    s = sub.add_parser("sweep-steps", parents=[common], help="one training run per step count")
    s.add_argument("--steps", required=True, help="comma-separated ascending step counts")

    r = sub.add_parser("sweep-label-rate", parents=[common], help="accuracy per (label rate, steps)")
    r.add_argument("--rates", required=True, help="comma-separated label rates, e.g. 0.01,0.03")
    r.add_argument("--steps", required=True)
    _split_counts(r)

    ti = sub.add_parser("time-inference", parents=[common], help="eval-pass wall time per step count")
    ti.add_argument("--steps", required=True)
    ti.add_argument("--repeats", type=int, default=20)

    d = sub.add_parser("dump-embeddings", parents=[common], help="write node representations")
    d.add_argument("--params", help="saved parameters (.npz); untrained weights if omitted")
    d.add_argument("--layer", choices=LAYERS, default="pre-softmax")

    v = sub.add_parser("validate-data", help="load and validate a dataset container")
    v.add_argument("--data", required=True)
    v.add_argument("--out", default=None)
    return p


def build_config(args) -> GesmConfig:
    config = PRESETS[args.preset] if args.preset else GesmConfig()
    if args.config:
        config = GesmConfig.from_file(args.config, base=config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.variant:
        overrides["variant"] = args.variant
    try:
        return config.with_overrides(overrides)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def save_params(params: GesmParams, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **params.state_dict())


def load_params(path) -> GesmParams:
    with np.load(path) as npz:
        return GesmParams.from_state_dict({k: npz[k] for k in npz.files})


def _fmt(x) -> str:
    return repr(float(x))


def cmd_train(args, config, ds, out: Path) -> int:
    (out / "config.txt").write_text(config.to_kv())
    if args.seeds > 1:
        split = _rate_split(args, args.label_rate, 0) if args.label_rate else None
        sweep = run_seeds(ds, config, args.seeds, split=split)
        _write_csv(out / "seeds.csv", ["seed", "test_metric"],
                   [(s, _fmt(m)) for s, m in zip(sweep.seeds, sweep.metrics)])
        (out / "summary.json").write_text(json.dumps(sweep.summary(), indent=2) + "\n")
        print(f"{config.variant.label}: {100 * sweep.mean:.2f} +- {100 * sweep.std:.2f} "
              f"over {len(sweep.metrics)} runs")
        return 0
    if args.label_rate:
        ds = data.apply_split(ds, _rate_split(args, args.label_rate, config.seed))
    report = train(ds, config)
    (out / "report.jsonl").write_text(report.to_jsonl())
    save_params(report.params, out / "params.npz")
    print(f"{config.variant.label}: test {report.test_metric:.4f} "
          f"(best epoch {report.best_epoch}, {report.epochs_run} epochs, status {report.status})")
    return 0 if not report.diverged else 1


def cmd_eval(args, config, ds, out: Path) -> int:
    params = load_params(args.params)
    config = _matching_config(params, config)
    mask = getattr(ds, f"{args.mask}_mask")
    metric = evaluate(ds, params, config, mask)
    (out / "eval.json").write_text(json.dumps({"mask": args.mask, "metric": metric}) + "\n")
    print(f"{args.mask}: {metric:.4f}")
    return 0


def _matching_config(params: GesmParams, config: GesmConfig) -> GesmConfig:
    """Adjust shape-related settings so ``config`` fits loaded parameters."""
    return config.replace(steps=params.steps, hidden=params.hidden,
                          heads=params.heads or config.heads, variant=_variant_for(params, config))


def _variant_for(params: GesmParams, config: GesmConfig):
    if params.heads and not config.variant.use_attention:
        return "att"
    if not params.heads and config.variant.use_attention:
        return "base"
    return config.variant


def cmd_sweep_steps(args, config, ds, out: Path) -> int:
    steps = _parse_list(args.steps)
    if not steps or steps != sorted(steps):
        raise UsageError("--steps must be a nonempty ascending list")
    rows = []
    for s in steps:
        try:
            rep = train(ds, config.replace(steps=s))
        except Exception as exc:
            log.warning("steps=%d failed: %s", s, exc)
            continue
        rows.append((s, _fmt(rep.train_metric), _fmt(rep.val_metric), _fmt(rep.test_metric)))
        print(f"s={s}: train {rep.train_metric:.4f} val {rep.val_metric:.4f} test {rep.test_metric:.4f}")
    _write_csv(out / "sweep_steps.csv", ["steps", "train_acc", "val_acc", "test_acc"], rows)
    return 0 if rows else 1


def cmd_sweep_label_rate(args, config, ds, out: Path) -> int:
    rates = _parse_list(args.rates, float)
    steps = _parse_list(args.steps)
    if not rates or not steps:
        raise UsageError("--rates and --steps must be nonempty")
    rows = []
    for rate in rates:
        split_ds = data.apply_split(ds, _rate_split(args, rate, config.seed))
        for s in steps:
            try:
                rep = train(split_ds, config.replace(steps=s))
            except Exception as exc:
                log.warning("rate=%g steps=%d failed: %s", rate, s, exc)
                continue
            rows.append((_fmt(rate), s, _fmt(rep.train_metric), _fmt(rep.val_metric),
                         _fmt(rep.test_metric)))
            print(f"rate={rate:g} s={s}: test {rep.test_metric:.4f}")
    _write_csv(out / "sweep_label_rate.csv", ["rate", "steps", "train_acc", "val_acc", "test_acc"], rows)
    return 0 if rows else 1


def time_inference(ds, config: GesmConfig, step_list, repeats: int) -> list[tuple[int, float, float, float]]:
    """Median/min/max milliseconds of one eval-mode forward pass per step count."""
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    pg = ds if isinstance(ds, PreparedGraph) else PreparedGraph(ds, config.np_dtype)
    runs = []
    for s in step_list:
        params = init_params(pg.ds.f, pg.ds.c, config.hidden, s, config.variant,
                             substream(config.seed, "init"), heads=config.heads, dtype=config.np_dtype)
        run = partial(forward, pg.X, pg.A_hat, params, config.variant, EVAL,
                      multi_label=config.multi_label, pooling=config.pooling)
        run()  # warmup
        runs.append(run)
    # round-robin so slow drift (frequency scaling, other load) hits every step count alike
    samples = [[] for _ in runs]
    for _ in range(repeats):
        for run, acc in zip(runs, samples):
            t0 = time.perf_counter()
            run()
            acc.append(1000.0 * (time.perf_counter() - t0))
    return [(s, float(np.median(a)), float(np.min(a)), float(np.max(a))) for s, a in zip(step_list, samples)]


def cmd_time_inference(args, config, ds, out: Path) -> int:
    steps = _parse_list(args.steps)
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    rows = time_inference(ds, config, steps, args.repeats)
    _write_csv(out / "time_inference.csv", ["steps", "median_ms", "min_ms", "max_ms"],
               [(s, f"{a:.4f}", f"{b:.4f}", f"{c:.4f}") for s, a, b, c in rows])
    for s, med, _, _ in rows:
        print(f"s={s}: {med:.3f} ms")
    return 0


def embeddings(ds, params: GesmParams, config: GesmConfig, layer: str) -> np.ndarray:
    if layer not in LAYERS:
        raise UsageError(f"unknown layer {layer!r}")
    pg = PreparedGraph(ds, config.np_dtype)
    res = forward(pg.X, pg.A_hat, params, config.variant, EVAL, multi_label=config.multi_label,
                  pooling=config.pooling)
    return (res.embedding if layer == "pre-propagation" else res.logits).data


def cmd_dump_embeddings(args, config, ds, out: Path) -> int:
    if args.params:
        params = load_params(args.params)
        config = _matching_config(params, config)
    else:
        params = init_params(ds.f, ds.c, config.hidden, config.steps, config.variant,
                             substream(config.seed, "init"), heads=config.heads, dtype=config.np_dtype)
    Z = embeddings(ds, params, config, args.layer)
    path = out / f"embeddings_{args.layer}.txt"
    data.export_embeddings(Z, path)
    print(f"wrote {Z.shape[0]}x{Z.shape[1]} to {path}")
    return 0


def cmd_validate(args) -> int:
    ds = data.load(args.data)
    stats = ds.stats()
    print(json.dumps(stats))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "stats.json").write_text(json.dumps(stats) + "\n")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-steps": cmd_sweep_steps,
    "sweep-label-rate": cmd_sweep_label_rate,
    "time-inference": cmd_time_inference,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("GESM_LOG_LEVEL", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        if args.command == "validate-data":
            return cmd_validate(args)
        config = build_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ds = data.load(args.data)
        return COMMANDS[args.command](args, config, ds, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gesm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"gesm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
