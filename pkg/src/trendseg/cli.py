"""Command-line entry point: ingest, train, evaluate, sweep, gradcheck.

Exit codes: 0 success, 1 internal failure or failed gradient check,
2 bad configuration, 3 missing or unreadable data.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterator, Optional, Sequence

from . import plotting
from .config import ConfigError, ExperimentConfig
from .data import DataError, SampleSet, assemble, load_csv, load_sampleset, save_sampleset, split_chronological
from .evaluation import build_report, emit_report
from .gradcheck import run_suite
from .models import Checkpoint, build_model, param_count
from .models import ConfigError as ModelConfigError
from .training import predict, train

logger = logging.getLogger("trendseg")

SWEEP_DAYS = (1, 5, 10, 20)
METRICS = ("auc", "accuracy", "precision", "recall", "f1")


class MissingData(Exception):
    pass


@contextlib.contextmanager
def staged_output(out: Path) -> Iterator[Path]:
    """Write into a sibling temp dir and move files into ``out`` only on success."""
    out = Path(out)
    created = [p for p in (out.parent, *out.parent.parents) if not p.exists()]
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        for p in created:  # innermost first
            with contextlib.suppress(OSError):
                p.rmdir()
        raise
    out.mkdir(parents=True, exist_ok=True)
    for src in sorted(tmp.rglob("*")):
        dst = out / src.relative_to(tmp)
        if src.is_dir():
            dst.mkdir(parents=True, exist_ok=True)
        else:
            os.replace(src, dst)
    shutil.rmtree(tmp, ignore_errors=True)


def load_samples(cfg: ExperimentConfig, csv_path: Optional[str] = None) -> SampleSet:
    d = cfg.raw["data"]
    cache = cfg.resolve(d["cache"]) if csv_path is None else None
    if cache is not None:
        if not cache.exists():
            raise MissingData(f"sample cache not found: {cache}")
        samples = load_sampleset(cache)
        for key in ("T_in", "T_out", "N", "input_mode"):
            if getattr(samples, key) != d[key]:
                raise ConfigError(f"data.{key}", f"cache has {getattr(samples, key)!r}, config {d[key]!r}")
        return samples
    path = Path(csv_path) if csv_path else cfg.resolve(d["csv"])
    if path is None:
        raise MissingData("no data source: set data.csv or data.cache")
    if not path.exists():
        raise MissingData(f"price file not found: {path}")
    series = load_csv(path, ticker=d["ticker"])
    return assemble(series, d["T_in"], d["T_out"], d["N"], d["input_mode"], cfg.sample_stride)


def _split_meta(split) -> dict:
    return {"train": len(split.train), "val": len(split.val), "test": len(split.test)}


def run_training(cfg: ExperimentConfig, out: Path) -> Checkpoint:
    split = split_chronological(load_samples(cfg))
    model = build_model(cfg.model_config())
    ckpt, history = train(model, split.train, split.val, cfg.train_config())
    ckpt.meta.update(ticker=split.train.ticker, split=_split_meta(split))
    ckpt.save(out / "checkpoint.tsck")
    history.write_csv(out / "history.csv")
    plotting.plot_history(history, out / "history.png")
    summary = {"params": param_count(model), "best_epoch": history.best_epoch + 1,
               "best_val_loss": history.best_val_loss, "epochs_run": len(history),
               "split": _split_meta(split), "config": cfg.raw}
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ckpt


def run_evaluation(cfg: ExperimentConfig, ckpt: Checkpoint, out: Path):
    mc = ckpt.config
    d = cfg.raw["data"]
    for key in ("T_in", "T_out", "N"):
        if getattr(mc, key) != d[key]:
            raise ConfigError(f"data.{key}", f"checkpoint was trained with {key}={getattr(mc, key)}")
    split = split_chronological(load_samples(cfg))
    model = ckpt.to_model()
    preds = predict(model, split.test)
    meta = {"model": mc.arch, "model_config": mc.to_dict(), "ticker": split.test.ticker,
            "input_mode": split.test.input_mode, "split": _split_meta(split),
            "checkpoint": ckpt.meta, "params": ckpt.param_count()}
    report = build_report(preds, split.test.targets, meta)
    emit_report(report, out)
    return report


# commands


def cmd_ingest(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    samples = load_samples(cfg, csv_path=args.csv)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{out.name}.", dir=out.parent)
    os.close(fd)
    try:
        save_sampleset(samples, tmp)
        os.replace(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    print(f"{len(samples)} samples -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    out = Path(args.out) if args.out else cfg.resolve(cfg.raw["out"])
    with staged_output(out) as tmp:
        ckpt = run_training(cfg, tmp)
    print(f"best epoch {ckpt.meta['epoch']} val loss {ckpt.meta['val_loss']:.6f} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise MissingData(f"checkpoint not found: {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    out = Path(args.out) if args.out else cfg.resolve(cfg.raw["out"])
    with staged_output(out) as tmp:
        report = run_evaluation(cfg, ckpt, tmp)
    o = report.overall
    auc = "n/a" if o["auc"] is None else f"{o['auc']:.4f}"
    print(f"accuracy {o['accuracy']:.4f} auc {auc} -> {out}")
    return 0


def parse_frames(text: str) -> list[int]:
    """``"1..11"``, ``"1-3"`` or ``"1,3,9"``."""
    text = text.strip()
    for sep in ("..", "-"):
        if sep in text:
            a, b = text.split(sep, 1)
            lo, hi = int(a), int(b)
            if lo < 1 or hi < lo:
                raise ConfigError("--frames", f"bad range {text!r}")
            return list(range(lo, hi + 1))
    frames = [int(x) for x in text.split(",") if x.strip()]
    if not frames or min(frames) < 1:
        raise ConfigError("--frames", f"bad frame list {text!r}")
    return frames


def _sweep_one(raw: dict, base_dir: str, N: int, out: str) -> dict:
    cfg = ExperimentConfig(raw, Path(base_dir)).with_frames(N)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = run_training(cfg, out)
    report = run_evaluation(cfg, ckpt, out)
    row = {"frames": N}
    row.update({m: report.overall[m] for m in METRICS})
    for r in report.per_day:
        if r["day"] in SWEEP_DAYS:
            row.update({f"day{r['day']}_{m}": r[m] for m in METRICS})
    return row


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    frames = parse_frames(args.frames)
    for N in frames:
        cfg.with_frames(N)
    out = Path(args.out) if args.out else cfg.resolve(cfg.raw["out"])
    threads = max(1, int(os.environ.get("TRENDSEG_THREADS", "1") or 1))
    with staged_output(out) as tmp:
        jobs = [(cfg.raw, str(cfg.base_dir), N, str(tmp / f"frames_{N:02d}")) for N in frames]
        if threads == 1 or len(jobs) == 1:
            rows = [_sweep_one(*job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
                rows = list(pool.map(_sweep_one, *zip(*jobs)))
        days = [d for d in SWEEP_DAYS if d <= cfg.raw["data"]["T_out"]]
        cols = ["frames", *METRICS, *(f"day{d}_{m}" for d in days for m in METRICS)]
        with open(tmp / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow(["" if row.get(c) is None else (row[c] if c == "frames" else f"{row[c]:.6f}")
                            for c in cols])
        plotting.plot_sweep(rows, days, tmp / "sweep.png")
    print(f"{len(rows)} runs -> {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  rel_err={r.rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trendseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="experiment JSON file")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field, e.g. data.N=9 (repeatable)")

    sp = sub.add_parser("ingest", help="build and cache a sample set from a price CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train a model and write checkpoint + history")
    with_config(sp, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    sp.add_argument("--ckpt", required=True)
    with_config(sp, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="train and evaluate over a range of input frame counts")
    with_config(sp, required=True)
    sp.add_argument("--frames", default="1..11")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MissingData, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
