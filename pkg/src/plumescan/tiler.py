"""Sliding-window planning and scene-level detection."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .detector import DetectionSet, Detector, Instance, PatchDetection
from .raster import BinaryMask, GridGeometry, RasterError, SceneGrid, extract_patch

DEFAULT_PATCH_SIZE = 768
DEFAULT_OVERLAP = 0.75


@dataclass(frozen=True)
class WindowPlan:
    size: int
    overlap: float
    origins: tuple[tuple[int, int], ...]

    @property
    def stride(self) -> int:
        return stride_for(self.size, self.overlap)


def stride_for(size: int, overlap: float) -> int:
    return max(1, int(math.floor(size * (1.0 - overlap))))


def axis_origins(dim: int, size: int, stride: int) -> list[int]:
    """0, stride, 2*stride, ... with the last window clamped flush to ``dim``."""
    last = dim - size
    out = list(range(0, last + 1, stride))
    if out[-1] != last:
        out.append(last)
    return out


def plan_windows(geometry: GridGeometry, size: int = DEFAULT_PATCH_SIZE,
                 overlap: float = DEFAULT_OVERLAP) -> WindowPlan:
    h, w = geometry.shape
    if size < 1 or size > min(h, w):
        raise RasterError(f"window size {size} exceeds scene dimension {min(h, w)}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    stride = stride_for(size, overlap)
    rows = axis_origins(h, size, stride)
    cols = axis_origins(w, size, stride)
    return WindowPlan(size, overlap, tuple((r, c) for r in rows for c in cols))


def map_to_scene(det: PatchDetection, origin: tuple[int, int]) -> Instance:
    r0, c0, h, w = det.bbox
    hard = det.mask
    mask = BinaryMask((r0 + origin[0], c0 + origin[1], h, w), hard)
    return Instance(mask, float(det.score), det.soft_mask,
                    {"windows": [[int(origin[0]), int(origin[1])]]})


def _run_window(scene: SceneGrid, detector: Detector, origin, size) -> list[Instance]:
    r, c = origin
    if not scene.valid[r:r + size, c:c + size].any():
        return []
    patch = extract_patch(scene, origin, size)
    return [map_to_scene(d, origin) for d in detector(patch)]


def _window_key(inst: Instance):
    return (tuple(inst.provenance["windows"][0]), -inst.score, inst.bbox)


def run_scene(scene: SceneGrid, detector: Detector, size: int = DEFAULT_PATCH_SIZE,
              overlap: float = DEFAULT_OVERLAP, workers: int = 1) -> DetectionSet:
    """Detections from every window, each window normalized as its own patch.

    Output is sorted by (window origin, descending score, bbox) regardless of
    evaluation order.
    """
    plan = plan_windows(scene.geometry, size, overlap)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda o: _run_window(scene, detector, o, size), plan.origins))
    else:
        chunks = [_run_window(scene, detector, o, size) for o in plan.origins]
    found = [inst for chunk in chunks for inst in chunk]
    found.sort(key=_window_key)
    return DetectionSet(scene.geometry, tuple(found))


def coverage_count(geometry: GridGeometry, plan: WindowPlan) -> np.ndarray:
    cover = np.zeros(geometry.shape, dtype=np.int32)
    for r, c in plan.origins:
        cover[r:r + plan.size, c:c + plan.size] += 1
    return cover
