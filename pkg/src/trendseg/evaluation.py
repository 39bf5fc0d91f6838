"""Pixel-level metrics, per-day tables and accuracy maps for trend predictions.

Predictions and targets are arrays of shape ``[S, T_out, 4]``: one trend map
per test sample, rows are output days, columns are the four prices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

THRESHOLD = 0.5


def binarize(pred, threshold: float = THRESHOLD) -> np.ndarray:
    """1 where ``pred >= threshold``."""
    return (np.asarray(pred) >= threshold).astype(np.uint8)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(preds, targets) -> ConfusionCounts:
    """Counts for binary ``preds`` against binary ``targets`` of equal shape."""
    p = np.asarray(preds).astype(bool)
    t = np.asarray(targets)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: preds {p.shape} vs targets {t.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("targets must be binary")
    t = t.astype(bool)
    return ConfusionCounts(tp=int((p & t).sum()), fp=int((p & ~t).sum()),
                           tn=int((~p & ~t).sum()), fn=int((~p & t).sum()))


def metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and F1; zero denominators give 0 and a flag."""
    c = counts
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"{name}_undefined")
            return 0.0
        return num / den

    acc = ratio(c.tp + c.tn, c.total, "accuracy")
    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1, "flags": flags}


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], len(x)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {s.shape} scores vs {y.shape} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _safe_auc(scores, labels) -> Optional[float]:
    try:
        return auc_roc(scores, labels)
    except ValueError:
        return None


def _check_pair(preds, targets):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets)
    if p.shape != t.shape or p.ndim != 3:
        raise ValueError(f"expected matching [S, T_out, 4] arrays, got {p.shape} and {t.shape}")
    return p, t


def per_day_metrics(preds, targets, threshold: float = THRESHOLD) -> list[dict]:
    """One row per output day, pooling that day's four price pixels over all samples."""
    p, t = _check_pair(preds, targets)
    rows = []
    for k in range(p.shape[1]):
        scores, labels = p[:, k].reshape(-1), t[:, k].reshape(-1)
        m = metrics(confusion(binarize(scores, threshold), labels))
        auc = _safe_auc(scores, labels)
        rows.append({"day": k + 1, "auc": auc, "accuracy": m["accuracy"],
                     "precision": m["precision"], "recall": m["recall"], "f1": m["f1"],
                     "flags": m["flags"] + ([] if auc is not None else ["auc_undefined"])})
    return rows


def accuracy_map(preds, targets, threshold: float = THRESHOLD) -> np.ndarray:
    """Per-pixel fraction of samples classified correctly, shape ``[T_out, 4]``."""
    p, t = _check_pair(preds, targets)
    if p.shape[0] == 0:
        raise ValueError("accuracy map needs at least one sample")
    return (binarize(p, threshold) == t).mean(axis=0)


@dataclass
class MetricsReport:
    overall: dict
    per_day: list[dict]
    accuracy_map: list[list[float]]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["overall"], d["per_day"], d["accuracy_map"], d.get("metadata", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def build_report(preds, targets, metadata: Optional[dict] = None,
                 threshold: float = THRESHOLD) -> MetricsReport:
    p, t = _check_pair(preds, targets)
    counts = confusion(binarize(p, threshold), t)
    m = metrics(counts)
    auc = _safe_auc(p, t)
    overall = {"auc": auc, "accuracy": m["accuracy"], "precision": m["precision"],
               "recall": m["recall"], "f1": m["f1"], "confusion": asdict(counts),
               "flags": m["flags"] + ([] if auc is not None else ["auc_undefined"])}
    amap = accuracy_map(p, t, threshold)
    meta = {"threshold": threshold, "samples": int(p.shape[0]), "T_out": int(p.shape[1])}
    meta.update(metadata or {})
    return MetricsReport(overall, per_day_metrics(p, t, threshold), amap.tolist(), meta)


PER_DAY_COLUMNS = ("day", "auc", "accuracy", "precision", "recall", "f1")


def _fmt(v) -> str:
    return "" if v is None else (str(v) if isinstance(v, int) else f"{v:.6f}")


def write_per_day_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_DAY_COLUMNS)
        for row in report.per_day:
            w.writerow([_fmt(row[c]) for c in PER_DAY_COLUMNS])


def write_accuracy_map_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "open", "low", "high", "close"])
        for k, row in enumerate(report.accuracy_map, start=1):
            w.writerow([k, *(f"{v:.6f}" for v in row)])


def pgm_bytes(amap) -> bytes:
    """8-bit binary PGM, 4 pixels wide and one row per day; accuracy 0 -> 0, 1 -> 255."""
    a = np.asarray(amap, dtype=np.float64)
    rows, cols = a.shape
    pixels = np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)
    return f"P5 {cols} {rows} 255\n".encode() + pixels.tobytes()


def emit_report(report: MetricsReport, out_dir, figures: bool = True) -> list[Path]:
    """Write metrics.json, per_day.csv, accuracy_map.csv/.pgm and, optionally, PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.json", out / "per_day.csv", out / "accuracy_map.csv", out / "accuracy_map.pgm"]
    paths[0].write_text(report.to_json() + "\n")
    write_per_day_csv(report, paths[1])
    write_accuracy_map_csv(report, paths[2])
    paths[3].write_bytes(pgm_bytes(report.accuracy_map))
    if figures:
        from . import plotting

        paths.append(plotting.plot_accuracy_map(report, out / "accuracy_map.png"))
        paths.append(plotting.plot_per_day(report, out / "per_day.png"))
    return paths
