"""
Per-patch detection: the instance data model, a threshold-and-components
oracle detector, and JSON import/export of scene-space detections.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .raster import BinaryMask, GridGeometry, Patch, RasterError, rle_decode, rle_encode

DETECTION_SCHEMA_VERSION = 1
MIN_COMPONENT_AREA = 5
_EIGHT = np.ones((3, 3), dtype=bool)


class DetectionFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PatchDetection:
    score: float
    bbox: tuple[int, int, int, int]  # patch-local (row0, col0, rows, cols)
    soft_mask: np.ndarray  # over bbox, values in [0, 1]; > 0.5 on the hard mask

    @property
    def mask(self) -> np.ndarray:
        return self.soft_mask > 0.5


@dataclass(frozen=True, eq=False)
class Instance:
    """One scene-space detection.

    ``soft`` covers the mask bbox and is held at float32 precision. A pixel
    inside the bbox but outside the hard mask carries soft value <= 0.5.
    """

    mask: BinaryMask
    score: float
    soft: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        soft = self.mask.data if self.soft is None else self.soft
        # float32 precision, matching the interchange format
        soft = np.asarray(soft, dtype=np.float32).astype(np.float64)
        if soft.shape != self.mask.data.shape:
            raise ValueError("soft mask must cover the bbox")
        object.__setattr__(self, "soft", soft)
        object.__setattr__(self, "_area", int(self.mask.data.sum()))

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return self.mask.bbox

    @property
    def area(self) -> int:
        return self._area

    def sort_key(self):
        return (-self.score, -self.area, self.bbox)

    def same_as(self, other: "Instance") -> bool:
        return (self.mask == other.mask and self.score == other.score
                and np.array_equal(self.soft, other.soft))


@dataclass(frozen=True)
class DetectionSet:
    geometry: GridGeometry
    instances: tuple[Instance, ...] = ()

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


Detector = Callable[[Patch], list]


# ---------------------------------------------------------------------------
# Oracle detector
# ---------------------------------------------------------------------------

def oracle_score(mean_excess: float) -> float:
    """logistic(mean_excess / 2)."""
    return 1.0 / (1.0 + math.exp(-mean_excess / 2.0))


def oracle_soft(excess: np.ndarray) -> np.ndarray:
    """min(1, 0.5 + excess / 4): strictly above 0.5 on every component pixel."""
    return np.minimum(1.0, 0.5 + excess / 4.0)


def oracle_detect(patch: Patch, k: float = 3.0, min_area: int = MIN_COMPONENT_AREA) -> list[PatchDetection]:
    """8-connected components of valid pixels with normalized value > k."""
    z = patch.values
    cand = patch.valid & (z > k)
    lab, n = ndimage.label(cand, structure=_EIGHT)
    if n == 0:
        return []
    out = []
    for idx, sl in enumerate(ndimage.find_objects(lab), start=1):
        comp = lab[sl] == idx
        area = int(comp.sum())
        if area < min_area:
            continue
        excess = np.where(comp, z[sl] - k, 0.0)
        soft = np.where(comp, oracle_soft(excess), 0.0)
        score = oracle_score(float(excess[comp].mean()))
        bbox = (sl[0].start, sl[1].start, sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        out.append(PatchDetection(score, bbox, soft))
    return out


def make_oracle(k: float = 3.0, min_area: int = MIN_COMPONENT_AREA) -> Detector:
    def detect(patch: Patch) -> list[PatchDetection]:
        return oracle_detect(patch, k=k, min_area=min_area)

    detect.__name__ = f"oracle(k={k})"
    return detect


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def _encode_soft(soft: np.ndarray) -> str:
    return base64.b64encode(np.asarray(soft, dtype="<f4").tobytes()).decode("ascii")


def _decode_soft(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) != 4 * shape[0] * shape[1]:
        raise DetectionFormatError("soft mask length does not match bbox")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def instance_to_json(inst: Instance) -> dict:
    d = {
        "score": inst.score,
        "bbox": list(inst.bbox),
        "mask": {"rle": rle_encode(inst.mask.data)},
        "soft": _encode_soft(inst.soft),
    }
    if inst.provenance:
        d["provenance"] = inst.provenance
    return d


def detections_to_json(dets: DetectionSet) -> dict:
    return {
        "version": DETECTION_SCHEMA_VERSION,
        "geometry": dets.geometry.to_dict(),
        "detections": [instance_to_json(i) for i in dets.instances],
    }


def export_detections(dets: DetectionSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(detections_to_json(dets), fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def detections_from_json(doc, geometry: GridGeometry | None = None) -> DetectionSet:
    if not isinstance(doc, dict) or not isinstance(doc.get("detections"), list):
        raise DetectionFormatError("expected an object with a 'detections' list")
    if geometry is None:
        if "geometry" not in doc:
            raise DetectionFormatError("no geometry in file and none supplied")
        geometry = GridGeometry.from_dict(doc["geometry"])
    h, w = geometry.shape
    out = []
    for i, d in enumerate(doc["detections"]):
        try:
            score = float(d["score"])
            r0, c0, rows, cols = (int(v) for v in d["bbox"])
            runs = d["mask"]["rle"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectionFormatError(f"detection {i}: schema violation ({exc})") from None
        if not 0.0 <= score <= 1.0 or not math.isfinite(score):
            raise DetectionFormatError(f"detection {i}: score {score} outside [0, 1]")
        if rows < 1 or cols < 1 or r0 < 0 or c0 < 0 or r0 + rows > h or c0 + cols > w:
            raise DetectionFormatError(f"detection {i}: bbox {[r0, c0, rows, cols]} out of bounds")
        try:
            data = rle_decode(runs, (rows, cols))
        except RasterError as exc:
            raise DetectionFormatError(f"detection {i}: {exc}") from None
        if not data.any():
            raise DetectionFormatError(f"detection {i}: empty mask")
        soft = _decode_soft(d["soft"], (rows, cols)) if d.get("soft") else None
        if soft is not None and (soft.min() < 0.0 or soft.max() > 1.0):
            raise DetectionFormatError(f"detection {i}: soft values outside [0, 1]")
        out.append(Instance(BinaryMask((r0, c0, rows, cols), data), score, soft, d.get("provenance", {})))
    return DetectionSet(geometry, tuple(out))


def import_detections(path, geometry: GridGeometry | None = None) -> DetectionSet:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DetectionFormatError(f"{path}: not valid JSON ({exc})") from None
    return detections_from_json(doc, geometry)
