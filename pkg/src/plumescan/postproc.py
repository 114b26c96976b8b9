"""
Scene-level post-processing in three operating modes.

baseline          confidence filter -> mask-IoU NMS
high_sensitivity  baseline -> fiber filter -> proximity merge
high_precision    high_sensitivity -> QND random forest (or a size floor)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .detector import Instance
from .morphology import MIN_SKELETON_AREA, fiber_metrics
from .raster import BinaryMask, SceneGrid

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.8
DEFAULT_DELTA = 0.2
DEFAULT_FIBER_RATIO = 1.25
DEFAULT_SIZE_FLOOR = 1500.0
MODES = ("baseline", "high_sensitivity", "high_precision")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = DEFAULT_TAU
    delta: float = DEFAULT_DELTA
    fiber_ratio_max: float = DEFAULT_FIBER_RATIO
    size_floor: float = DEFAULT_SIZE_FLOOR
    hp_filter: str = "qnd"  # "qnd" or "size"
    mode: str = "baseline"
    axis_convention: str = "segment"
    dbscan_eps: float = 10.0
    dbscan_min_pts: int = 25
    core_percentile: float = 98.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if not self.fiber_ratio_max > 1.0:
            raise ValueError("fiber_ratio_max must be > 1")
        if self.size_floor < 0:
            raise ValueError("size_floor must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.hp_filter not in ("qnd", "size"):
            raise ValueError(f"unknown high-precision filter {self.hp_filter!r}")

    def with_(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Mask geometry
# ---------------------------------------------------------------------------

def mask_intersection(a: BinaryMask, b: BinaryMask) -> int:
    ar, ac, ah, aw = a.bbox
    br, bc, bh, bw = b.bbox
    r0, r1 = max(ar, br), min(ar + ah, br + bh)
    c0, c1 = max(ac, bc), min(ac + aw, bc + bw)
    if r0 >= r1 or c0 >= c1:
        return 0
    sa = a.data[r0 - ar:r1 - ar, c0 - ac:c1 - ac]
    sb = b.data[r0 - br:r1 - br, c0 - bc:c1 - bc]
    return int(np.count_nonzero(sa & sb))


def mask_iou(a: BinaryMask, b: BinaryMask, area_a: int | None = None, area_b: int | None = None) -> float:
    na = a.area if area_a is None else area_a
    nb = b.area if area_b is None else area_b
    if na == 0 and nb == 0:
        raise ValueError("IoU undefined for two empty masks")
    inter = mask_intersection(a, b)
    return inter / (na + nb - inter)


def union_masks(masks: Sequence[BinaryMask]) -> BinaryMask:
    r0 = min(m.bbox[0] for m in masks)
    c0 = min(m.bbox[1] for m in masks)
    r1 = max(m.bbox[0] + m.bbox[2] for m in masks)
    c1 = max(m.bbox[1] + m.bbox[3] for m in masks)
    out = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for m in masks:
        r, c, h, w = m.bbox
        out[r - r0:r - r0 + h, c - c0:c - c0 + w] |= m.data
    return BinaryMask.from_dense(out, (r0, c0))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def filter_confidence(dets: Sequence[Instance], tau: float) -> list[Instance]:
    return [d for d in dets if d.score >= tau]


def nms(dets: Sequence[Instance], delta: float) -> list[Instance]:
    """Greedy mask-IoU suppression; ordered by score desc, area desc, bbox."""
    order = sorted(dets, key=Instance.sort_key)
    kept: list[Instance] = []
    for d in order:
        if all(mask_iou(d.mask, k.mask, d.area, k.area) <= delta for k in kept):
            kept.append(d)
    return kept


def fiber_filter(dets: Sequence[Instance], fiber_ratio_max: float = DEFAULT_FIBER_RATIO,
                 convention: str = "segment") -> list[Instance]:
    out = []
    for d in dets:
        if d.area < MIN_SKELETON_AREA:
            out.append(d)
            continue
        rep = fiber_metrics(d.mask.data, convention)
        if rep.ratio <= fiber_ratio_max:
            out.append(d)
        else:
            log.debug("fiber filter drops %s (ratio %.3f)", d.bbox, rep.ratio)
    return out


def _merge_group(group: list[Instance]) -> Instance:
    if len(group) == 1:
        return group[0]
    mask = union_masks([g.mask for g in group])
    total = sum(g.area for g in group)
    score = sum(g.area * g.score for g in group) / total
    r0, c0, h, w = mask.bbox
    soft = np.zeros((h, w))
    for g in group:
        r, c, gh, gw = g.bbox
        sl = (slice(r - r0, r - r0 + gh), slice(c - c0, c - c0 + gw))
        soft[sl] = np.maximum(soft[sl], g.soft)
    windows = sorted({tuple(wi) for g in group for wi in g.provenance.get("windows", [])})
    members = sorted([list(g.bbox) + [g.score] for g in group])
    prov = {"windows": [list(wi) for wi in windows], "merged": members}
    return Instance(mask, min(1.0, max(0.0, score)), soft, prov)


def merge_proximal(dets: Sequence[Instance]) -> list[Instance]:
    """Union every connected group of masks that share at least one pixel.

    Merged score is the area-weighted mean of member scores; the soft mask is
    the per-pixel maximum over members.
    """
    dets = sorted(dets, key=Instance.sort_key)
    n = len(dets)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if find(i) != find(j) and mask_intersection(dets[i].mask, dets[j].mask) > 0:
                parent[find(j)] = find(i)
    groups: dict[int, list[Instance]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(dets[i])
    merged = [_merge_group(g) for g in groups.values()]
    return sorted(merged, key=Instance.sort_key)


def size_filter(dets: Sequence[Instance], floor: float) -> list[Instance]:
    if floor < 0:
        raise ValueError("size floor must be >= 0")
    return [d for d in dets if d.area >= floor]


def classify_filter(dets: Sequence[Instance], scene: SceneGrid, classifier,
                    eps: float = 10.0, min_pts: int = 25, q: float = 98.0) -> list[Instance]:
    """Keep detections the classifier calls plume; failed feature extraction counts as artifact."""
    from .forest import rf_predict
    from .qnd import QndError, extract_features

    out = []
    for d in dets:
        try:
            feats = extract_features(scene, d.mask, eps, min_pts, q)
        except QndError as exc:
            log.debug("QND drops %s: %s", d.bbox, exc)
            continue
        label, _ = rf_predict(classifier, feats.to_array())
        if label == "plume":
            out.append(d)
    return out


def run_baseline(dets: Sequence[Instance], cfg: PipelineConfig) -> list[Instance]:
    return nms(filter_confidence(dets, cfg.tau), cfg.delta)


def run_high_sensitivity(dets: Sequence[Instance], cfg: PipelineConfig) -> list[Instance]:
    base = run_baseline(dets, cfg)
    return merge_proximal(fiber_filter(base, cfg.fiber_ratio_max, cfg.axis_convention))


def run_mode(dets: Sequence[Instance], scene: SceneGrid | None, cfg: PipelineConfig,
             classifier=None) -> list[Instance]:
    if cfg.mode == "baseline":
        return run_baseline(dets, cfg)
    hs = run_high_sensitivity(dets, cfg)
    if cfg.mode == "high_sensitivity":
        return hs
    if cfg.hp_filter == "size":
        return size_filter(hs, cfg.size_floor)
    if classifier is None:
        raise PipelineError("high_precision mode requires a trained QND classifier or a size floor")
    if scene is None:
        raise PipelineError("high_precision QND filtering requires the scene")
    return classify_filter(hs, scene, classifier, cfg.dbscan_eps, cfg.dbscan_min_pts, cfg.core_percentile)
