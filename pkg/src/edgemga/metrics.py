"""Evaluation battery: success rate, query cost, noise rate, attribution IoU.

Per-image rows and the summary row are written as CSV with ``repr`` floats,
so any summary recomputed from the per-image file matches bit for bit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cam import binarize

__all__ = [
    "DEFAULT_THRESHOLDS",
    "NoSuccessError",
    "EvaluationRecord",
    "success_rate",
    "average_queries",
    "noise_rate",
    "iou",
    "iou_sweep",
    "summarize",
    "PER_IMAGE_COLUMNS",
    "SUMMARY_COLUMNS",
    "records_to_csv",
    "records_from_csv",
    "summary_to_csv",
    "iou_sweep_to_csv",
]

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7, 0.9)


class NoSuccessError(ValueError):
    """Average query cost is undefined without a successful attack."""


@dataclass
class EvaluationRecord:
    image_id: str
    y: int
    success: bool
    queries: int
    noise_rate: float
    iou: dict[float, float] = field(default_factory=dict)
    adv_class: int = -1


def success_rate(records) -> float:
    records = list(records)
    if not records:
        raise ValueError("success_rate of an empty record set")
    return sum(bool(r.success) for r in records) / len(records)


def average_queries(records, successful_only: bool = True) -> float:
    """Mean ``queries`` over successful records (or all, if asked)."""
    pool = [r for r in records if r.success] if successful_only else list(records)
    if not pool:
        raise NoSuccessError("no successful attacks to average over")
    return math.fsum(r.queries for r in pool) / len(pool)


def noise_rate(x, x_hat, epsilon: float, atol: float = 1e-6) -> float:
    """Mean of ``|x_hat - x| / epsilon`` over all pixels, in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = np.abs(x_hat - x)
    if diff.max(initial=0) > epsilon + atol:
        raise ValueError("x_hat lies outside the epsilon ball")
    return float(min(diff.mean() / epsilon, 1.0)) if diff.size else 0.0


def iou(map_a, map_b, threshold: float) -> float:
    """IoU of the two maps binarized at ``threshold``; 1.0 if both are empty."""
    a = binarize(map_a, threshold).astype(bool)
    b = binarize(map_b, threshold).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_sweep(map_a, map_b, thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float]]:
    thresholds = list(thresholds)
    if any(t1 < t0 for t0, t1 in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    return [(t, iou(map_a, map_b, t)) for t in thresholds]


PER_IMAGE_COLUMNS = (
    "image_id",
    "y",
    "success",
    "queries",
    "noise_rate",
    *(f"iou@{t}" for t in DEFAULT_THRESHOLDS),
    "adv_class",
)
SUMMARY_COLUMNS = (
    "interpreter",
    "source",
    "target",
    "success_rate",
    "avg_queries",
    "noise_mean",
    "noise_std",
    "n_images",
    "total_queries",
)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def records_to_csv(path, records) -> None:
    rows = []
    for r in records:
        rows.append(
            [r.image_id, int(r.y), bool(r.success), int(r.queries), float(r.noise_rate)]
            + [float(r.iou.get(t, float("nan"))) for t in DEFAULT_THRESHOLDS]
            + [int(r.adv_class)]
        )
    _write_rows(path, PER_IMAGE_COLUMNS, rows)


def records_from_csv(path) -> list[EvaluationRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PER_IMAGE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out.append(
                EvaluationRecord(
                    image_id=row["image_id"],
                    y=int(row["y"]),
                    success=row["success"] == "1",
                    queries=int(row["queries"]),
                    noise_rate=float(row["noise_rate"]) if row["noise_rate"] else float("nan"),
                    iou={t: float(row[f"iou@{t}"]) if row[f"iou@{t}"] else float("nan") for t in DEFAULT_THRESHOLDS},
                    adv_class=int(row["adv_class"]),
                )
            )
    return out


def summarize(records, interpreter="CAM", source="", target="") -> dict:
    """Table-style summary. Noise statistics cover successful attacks only."""
    records = list(records)
    n = len(records)
    ok = [r for r in records if r.success]
    noise = np.array([r.noise_rate for r in ok], dtype=np.float64)
    return {
        "interpreter": interpreter,
        "source": source,
        "target": target,
        "success_rate": success_rate(records) if n else float("nan"),
        "avg_queries": average_queries(records) if ok else float("nan"),
        "noise_mean": float(noise.mean()) if len(noise) else float("nan"),
        "noise_std": float(noise.std()) if len(noise) else float("nan"),
        "n_images": n,
        "total_queries": sum(int(r.queries) for r in records),
    }


def summary_to_csv(path, summary: dict) -> None:
    _write_rows(path, SUMMARY_COLUMNS, [[summary[c] for c in SUMMARY_COLUMNS]])


def iou_sweep_to_csv(path, records, thresholds=DEFAULT_THRESHOLDS) -> None:
    """Mean and std of per-image IoU at each threshold (successful attacks)."""
    ok = [r for r in records if r.success]
    rows = []
    for t in thresholds:
        vals = np.array([r.iou[t] for r in ok], dtype=np.float64)
        rows.append([float(t), float(vals.mean()) if len(vals) else float("nan"),
                     float(vals.std()) if len(vals) else float("nan"), len(vals)])
    _write_rows(path, ("threshold", "mean_iou", "std_iou", "n"), rows)
