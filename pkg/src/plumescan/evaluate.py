"""
Pixel and instance metrics, greedy IoU matching, mAP and parameter sweeps.

Conventions: precision is 1 when nothing is predicted, recall is 1 when
there is nothing to find, and F1 is 0 whenever precision + recall is 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .detector import Instance
from .postproc import PipelineConfig, mask_iou, run_mode
from .raster import BinaryMask, GridGeometry, SceneGrid
from .synthgen import PlumeLabel

SWEEP_PARAMS = ("tau", "delta", "theta")
SWEEP_COLUMNS = ("param", "value", "TP", "FP", "FN", "precision", "recall", "f1", "map")
DEFAULT_THETA = 0.1


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (pred index, truth index, IoU)
    unmatched_preds: tuple[int, ...]
    unmatched_truths: tuple[int, ...]


@dataclass(frozen=True)
class MetricsReport:
    TP: int
    FP: int
    FN: int
    precision: float
    recall: float
    f1: float
    map_at_iou: float | None = None
    mode: str = ""
    thresholds: tuple[float, float, float] | None = None  # (tau, delta, theta)
    param: str = ""
    value: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if self.thresholds is not None:
            d["thresholds"] = dict(zip(("tau", "delta", "theta"), self.thresholds))
        d["conventions"] = "precision=1 if TP+FP=0; recall=1 if TP+FN=0; f1=0 if P+R=0"
        return d


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _as_mask(obj) -> BinaryMask:
    if isinstance(obj, BinaryMask):
        return obj
    if isinstance(obj, (Instance, PlumeLabel)):
        return obj.mask
    raise TypeError(f"cannot take a mask from {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Pixel level
# ---------------------------------------------------------------------------

def union_semantic(instances: Sequence, geometry: GridGeometry) -> np.ndarray:
    """Dense boolean union of the hard masks."""
    out = np.zeros(geometry.shape, dtype=bool)
    for inst in instances:
        m = _as_mask(inst)
        r, c, h, w = m.bbox
        out[r:r + h, c:c + w] |= m.data
    return out


def pixel_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise EvaluationError("prediction and truth grids differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return _prf(tp, fp, fn)


# ---------------------------------------------------------------------------
# Instance level
# ---------------------------------------------------------------------------

def prediction_order(preds: Sequence[Instance]) -> list[int]:
    """Descending score, then descending area, then index."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, -preds[i].area, i))


def match_instances(preds: Sequence[Instance], truths: Sequence, theta: float = DEFAULT_THETA) -> MatchResult:
    """Greedy matching; each prediction takes the unclaimed truth of largest IoU above theta."""
    if not 0.0 < theta < 1.0:
        raise EvaluationError(f"theta must lie in (0, 1), got {theta}")
    tmasks = [_as_mask(t) for t in truths]
    tareas = [m.area for m in tmasks]
    claimed = [False] * len(tmasks)
    pairs = []
    unmatched = []
    for i in prediction_order(preds):
        p = preds[i]
        best, best_iou = -1, theta
        for j, tm in enumerate(tmasks):
            if claimed[j]:
                continue
            iou = mask_iou(p.mask, tm, p.area, tareas[j])
            if iou > best_iou:
                best, best_iou = j, iou
        if best < 0:
            unmatched.append(i)
        else:
            claimed[best] = True
            pairs.append((i, best, float(best_iou)))
    free = tuple(j for j, c in enumerate(claimed) if not c)
    return MatchResult(tuple(pairs), tuple(sorted(unmatched)), free)


def instance_metrics(match: MatchResult, *, mode: str = "", thresholds=None,
                     map_value: float | None = None) -> MetricsReport:
    tp, fp, fn = len(match.pairs), len(match.unmatched_preds), len(match.unmatched_truths)
    p, r, f = _prf(tp, fp, fn)
    return MetricsReport(tp, fp, fn, p, r, f, map_value, mode,
                         None if thresholds is None else tuple(thresholds))


def _pr_points(cases, theta: float) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct score threshold, pooled over cases."""
    n_truth = sum(len(t) for _, t in cases)
    if n_truth == 0:
        raise EvaluationError("mAP undefined without ground truth")
    scores = sorted({p.score for preds, _ in cases for p in preds}, reverse=True)
    points = []
    for s in scores:
        tp = fp = 0
        for preds, truths in cases:
            kept = [p for p in preds if p.score >= s]
            m = match_instances(kept, truths, theta)
            tp += len(m.pairs)
            fp += len(m.unmatched_preds)
        points.append((tp / n_truth, tp / (tp + fp)))
    return points


def average_precision(points: Sequence[tuple[float, float]]) -> float:
    """All-point area under the monotone precision envelope."""
    if not points:
        return 0.0
    pts = sorted(points)
    recalls = np.array([0.0] + [r for r, _ in pts])
    prec = np.array([p for _, p in pts])
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.clip(np.sum(np.diff(recalls) * envelope), 0.0, 1.0))


def map_at_iou(preds: Sequence[Instance], truths: Sequence, theta: float = DEFAULT_THETA) -> float:
    return average_precision(_pr_points([(preds, truths)], theta))


def pooled_map(cases: Sequence[tuple[Sequence[Instance], Sequence]], theta: float = DEFAULT_THETA) -> float:
    """mAP with matching done per scene and the PR curve pooled across scenes."""
    return average_precision(_pr_points(cases, theta))


def pooled_metrics(cases, theta: float = DEFAULT_THETA, *, mode: str = "", thresholds=None,
                   with_map: bool = True) -> MetricsReport:
    tp = fp = fn = 0
    for preds, truths in cases:
        m = match_instances(preds, truths, theta)
        tp += len(m.pairs)
        fp += len(m.unmatched_preds)
        fn += len(m.unmatched_truths)
    p, r, f = _prf(tp, fp, fn)
    mp = None
    if with_map and sum(len(t) for _, t in cases):
        mp = pooled_map(cases, theta)
    return MetricsReport(tp, fp, fn, p, r, f, mp, mode,
                         None if thresholds is None else tuple(thresholds))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SweepCase:
    detections: Sequence[Instance]
    truths: Sequence
    scene: SceneGrid | None = None


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive of stop) or a comma list."""
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"bad grid {text!r}; expected start:stop:step")
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ValueError(f"empty grid {text!r}")
        return [round(start + i * step, 10) for i in range(n)]
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ValueError(f"empty grid {text!r}")
    return vals


def sweep(cases: Sequence[SweepCase], param: str, grid: Sequence[float],
          cfg: PipelineConfig = PipelineConfig(), theta: float = DEFAULT_THETA,
          classifier=None) -> list[MetricsReport]:
    """Vary one of tau / delta / theta, holding the rest at ``cfg`` / ``theta``."""
    if param not in SWEEP_PARAMS:
        raise EvaluationError(f"unknown sweep parameter {param!r}")
    if not grid:
        raise EvaluationError("empty sweep grid")
    fixed = None
    if param == "theta":
        fixed = [run_mode(c.detections, c.scene, cfg, classifier) for c in cases]
    reports = []
    for v in sorted(grid):
        th = theta
        if param == "theta":
            outs, th = fixed, v
            run_cfg = cfg
        else:
            run_cfg = cfg.with_(**{param: v})
            outs = [run_mode(c.detections, c.scene, run_cfg, classifier) for c in cases]
        pooled = [(o, c.truths) for o, c in zip(outs, cases)]
        rep = pooled_metrics(pooled, th, mode=run_cfg.mode,
                             thresholds=(run_cfg.tau, run_cfg.delta, th))
        reports.append(MetricsReport(**{**rep.__dict__, "param": param, "value": float(v)}))
    return reports


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(round(x, 12))
    return str(x)


def sweep_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in sorted(reports, key=lambda r: (r.param, r.value)):
        w.writerow([r.param, _fmt(r.value), r.TP, r.FP, r.FN, _fmt(r.precision),
                    _fmt(r.recall), _fmt(r.f1), _fmt(r.map_at_iou)])
    return buf.getvalue()

