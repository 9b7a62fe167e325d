"""Region similarity (IoU), boundary F-measure and report aggregation."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError

CSV_HEADER = ["condition", "variant", "seed", "fold", "sequence", "frame", "F", "IoU"]
_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(m, g):
    m = np.asarray(m).astype(bool)
    g = np.asarray(g).astype(bool)
    if m.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {m.shape} vs {g.shape}")
    return m, g


def iou(m, g) -> float:
    m, g = _pair(m, g)
    union = np.logical_or(m, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(m, g).sum() / union)


def boundary_map(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background (outside counts as background)."""
    mask = np.asarray(mask).astype(bool)
    if mask.size == 0:
        return mask
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def default_tolerance(shape) -> int:
    h, w = shape
    return int(math.ceil(0.0075 * math.hypot(h, w)))


def boundary_f(m, g, tolerance_px: Optional[int] = None) -> float:
    m, g = _pair(m, g)
    tol = default_tolerance(m.shape) if tolerance_px is None else int(tolerance_px)
    bm, bg = boundary_map(m), boundary_map(g)
    nm, ng = int(bm.sum()), int(bg.sum())
    if nm == 0 and ng == 0:
        return 1.0
    if nm == 0 or ng == 0:
        return 0.0
    if tol > 0:
        se = disc(tol)
        gd = ndimage.binary_dilation(bg, structure=se)
        md = ndimage.binary_dilation(bm, structure=se)
    else:
        gd, md = bg, bm
    precision = (bm & gd).sum() / nm
    recall = (bg & md).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class EvalRow:
    condition: str
    variant: str
    seed: int
    fold: int
    sequence: str
    frame: int
    F: float
    IoU: float


@dataclass
class ConditionSummary:
    sequence_means: Dict[Tuple[int, str], Tuple[float, float]]  # (seed, sequence) -> (F, IoU)
    seed_means: Dict[int, Tuple[float, float]]
    mean_F: float
    mean_IoU: float
    frame_mean_F: float
    frame_mean_IoU: float


@dataclass
class EvalReport:
    rows: List[EvalRow]
    aggregates: Dict[Tuple[str, str], ConditionSummary]
    metadata: Dict[str, str] = field(default_factory=dict)


def _mean2(pairs):
    arr = np.asarray(list(pairs), dtype=np.float64)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def aggregate(rows: Sequence[EvalRow], group_by=("condition", "variant"), metadata=None) -> EvalReport:
    """Mean over frames per sequence, then over sequences per seed, then over seeds.

    The flat per-frame mean is reported alongside, since either reading is
    plausible for a single headline number.
    """
    rows = list(rows)
    if not rows:
        raise DataError("cannot aggregate an empty set of evaluation rows")
    groups: Dict[tuple, List[EvalRow]] = OrderedDict()
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in group_by), []).append(r)
    aggregates = OrderedDict()
    for key, grows in groups.items():
        per_seq: Dict[Tuple[int, str], list] = OrderedDict()
        for r in grows:
            per_seq.setdefault((r.seed, r.sequence), []).append((r.F, r.IoU))
        seq_means = OrderedDict((k, _mean2(v)) for k, v in per_seq.items())
        per_seed: Dict[int, list] = OrderedDict()
        for (seed, _), means in seq_means.items():
            per_seed.setdefault(seed, []).append(means)
        seed_means = OrderedDict((s, _mean2(v)) for s, v in per_seed.items())
        mean_f, mean_iou = _mean2(seed_means.values())
        flat_f, flat_iou = _mean2((r.F, r.IoU) for r in grows)
        aggregates[key] = ConditionSummary(seq_means, seed_means, mean_f, mean_iou, flat_f, flat_iou)
    return EvalReport(rows, aggregates, dict(metadata or {}))


def evaluate_pair(pred, gt, tolerance_px=None) -> Tuple[float, float]:
    return boundary_f(pred, gt, tolerance_px), iou(pred, gt)


# ---------------------------------------------------------------- CSV


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report_csv(report: EvalReport, path) -> None:
    """Frame rows, then per condition: one row per (seed, sequence) mean,
    one per seed (sequence ``mean``), the final mean (seed ``mean``) and the
    flat frame mean (sequence ``all_frames``). Aggregate rows carry ``frame=mean``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.condition, r.variant, r.seed, r.fold, r.sequence, r.frame, _fmt(r.F), _fmt(r.IoU)])
        for (condition, variant), agg in report.aggregates.items():
            folds = {}
            for r in report.rows:
                if (r.condition, r.variant) == (condition, variant):
                    folds[(r.seed, r.sequence)] = r.fold
            for (seed, seq), (f, j) in agg.sequence_means.items():
                w.writerow([condition, variant, seed, folds[(seed, seq)], seq, "mean", _fmt(f), _fmt(j)])
            for seed, (f, j) in agg.seed_means.items():
                w.writerow([condition, variant, seed, "*", "mean", "mean", _fmt(f), _fmt(j)])
            w.writerow([condition, variant, "mean", "*", "mean", "mean", _fmt(agg.mean_F), _fmt(agg.mean_IoU)])
            w.writerow([condition, variant, "mean", "*", "all_frames", "mean",
                        _fmt(agg.frame_mean_F), _fmt(agg.frame_mean_IoU)])


def read_report_csv(path) -> Tuple[List[EvalRow], List[dict]]:
    """Parse a report CSV into frame rows and raw aggregate rows."""
    rows, agg = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for rec in reader:
            if rec["frame"] == "mean":
                agg.append(rec)
            else:
                rows.append(EvalRow(rec["condition"], rec["variant"], int(rec["seed"]), int(rec["fold"]),
                                    rec["sequence"], int(rec["frame"]), float(rec["F"]), float(rec["IoU"])))
    return rows, agg


def final_means(agg_rows: Iterable[dict]) -> Dict[Tuple[str, str], Tuple[float, float]]:
    out = {}
    for rec in agg_rows:
        if rec["seed"] == "mean" and rec["sequence"] == "mean":
            out[(rec["condition"], rec["variant"])] = (float(rec["F"]), float(rec["IoU"]))
    return out
