"""Confidence-weighted plume probability map and its correlation with XCH4."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.stats import rankdata

from .detector import Instance
from .raster import GridGeometry, SceneGrid


class ProbabilityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbabilityGrid:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.geometry.shape:
            raise ProbabilityError(f"probability shape {v.shape} != grid {self.geometry.shape}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    spearman: float
    n: int

    def to_json(self) -> dict:
        return {"pearson": self.pearson, "spearman": self.spearman, "n": self.n}


def aggregate(instances: Iterable[Instance], geometry: GridGeometry) -> ProbabilityGrid:
    """P(p) = sum_k s_k M_k(p) / sum_k s_k over detections whose soft mask covers p.

    A detection covers every pixel of its bbox, where its soft mask is defined.
    Score-0 detections are skipped. Pixels covered once take the soft value
    directly so the single-detection case is exact.
    """
    h, w = geometry.shape
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int32)
    first = np.zeros((h, w))
    for inst in instances:
        if inst.score <= 0:
            continue
        r0, c0, bh, bw = inst.bbox
        # clip to the grid in case a bbox hangs over the edge
        rr0, cc0 = max(r0, 0), max(c0, 0)
        rr1, cc1 = min(r0 + bh, h), min(c0 + bw, w)
        if rr0 >= rr1 or cc0 >= cc1:
            continue
        soft = inst.soft[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
        sl = (slice(rr0, rr1), slice(cc0, cc1))
        num[sl] += inst.score * soft
        den[sl] += inst.score
        fresh = count[sl] == 0
        first[sl][fresh] = soft[fresh]
        count[sl] += 1
    out = np.zeros((h, w))
    many = count > 1
    out[many] = num[many] / den[many]
    once = count == 1
    out[once] = first[once]
    return ProbabilityGrid(geometry, np.clip(out, 0.0, 1.0))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if not denom > 0:
        raise ProbabilityError("undefined correlation")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def correlation_report(prob, scene: SceneGrid) -> CorrelationReport:
    """Pearson and Spearman (average ranks) over valid pixels with P > 0."""
    P = prob.values if isinstance(prob, ProbabilityGrid) else np.asarray(prob, dtype=np.float64)
    if P.shape != scene.shape:
        raise ProbabilityError("probability map and scene differ in shape")
    sel = (P > 0) & scene.valid
    n = int(sel.sum())
    if n < 2:
        raise ProbabilityError("undefined correlation")
    p = P[sel]
    x = scene.xch4[sel]
    if np.ptp(p) == 0 or np.ptp(x) == 0:
        raise ProbabilityError("undefined correlation")
    r = _pearson(p, x)
    rho = _pearson(rankdata(p), rankdata(x))
    return CorrelationReport(r, rho, n)
