"""
Scene and mask data model: z-score normalization, patch extraction,
run-length mask encoding and the SGRID binary scene format.

SGRID v1 layout: one UTF-8 JSON header line terminated by ``\\n``,
followed by row-major channel payloads in header order. ``xch4`` and
``albedo`` are little-endian float32, ``valid`` is one byte per pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INVALID_SENTINEL = -10.0
MAX_DIM = 1 << 20

# Native L3 grid sizes (m).
METHANESAT_PIXEL_M = 45.0
METHANEAIR_PIXEL_M = 10.0


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    pixel_size: float = METHANESAT_PIXEL_M
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise RasterError(f"grid dimensions must be >= 1, got {self.height}x{self.width}")
        if not self.pixel_size > 0:
            raise RasterError(f"pixel_size must be > 0, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "pixel_size_m": self.pixel_size,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            pixel_size=float(d.get("pixel_size_m", METHANESAT_PIXEL_M)),
            origin=tuple(d.get("origin", (0.0, 0.0))),
        )


def _frozen(a, dtype) -> np.ndarray:
    """Read-only array; writable inputs are copied so the caller's array stays writable."""
    out = np.asarray(a, dtype=dtype)
    if out.flags.writeable:
        out = out.copy()
        out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SceneGrid:
    """XCH4 raster (ppb) with validity mask and optional albedo channel."""

    geometry: GridGeometry
    xch4: np.ndarray
    valid: np.ndarray
    albedo: np.ndarray | None = None

    def __post_init__(self):
        shape = self.geometry.shape
        xch4 = _frozen(self.xch4, np.float64)
        valid = _frozen(self.valid, bool)
        if xch4.shape != shape or valid.shape != shape:
            raise RasterError(f"channel shapes {xch4.shape}/{valid.shape} != geometry {shape}")
        if not np.all(np.isfinite(xch4[valid])):
            raise RasterError("xch4 must be finite wherever valid")
        object.__setattr__(self, "xch4", xch4)
        object.__setattr__(self, "valid", valid)
        if self.albedo is not None:
            albedo = _frozen(self.albedo, np.float64)
            if albedo.shape != shape:
                raise RasterError("albedo shape does not match geometry")
            a = albedo[valid]
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise RasterError("albedo must lie in [0, 1] wherever valid")
            object.__setattr__(self, "albedo", albedo)

    @property
    def shape(self) -> tuple[int, int]:
        return self.geometry.shape

    def replace(self, **changes) -> "SceneGrid":
        kw = dict(geometry=self.geometry, xch4=self.xch4, valid=self.valid, albedo=self.albedo)
        kw.update(changes)
        return SceneGrid(**kw)

    def __eq__(self, other):
        if not isinstance(other, SceneGrid):
            return NotImplemented
        if self.geometry != other.geometry:
            return False
        if (self.albedo is None) != (other.albedo is None):
            return False
        same = np.array_equal(self.xch4, other.xch4) and np.array_equal(self.valid, other.valid)
        if self.albedo is not None:
            same = same and np.array_equal(self.albedo, other.albedo)
        return bool(same)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A tight-bbox boolean mask in scene coordinates.

    ``bbox`` is ``(row0, col0, rows, cols)``; ``data`` has shape ``(rows, cols)``.
    """

    bbox: tuple[int, int, int, int]
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        r0, c0, h, w = (int(v) for v in self.bbox)
        if data.shape != (h, w):
            raise RasterError(f"mask data shape {data.shape} != bbox extent {(h, w)}")
        object.__setattr__(self, "bbox", (r0, c0, h, w))
        object.__setattr__(self, "data", data)

    @classmethod
    def from_dense(cls, dense: np.ndarray, offset: tuple[int, int] = (0, 0)) -> "BinaryMask":
        """Crop a dense boolean array to its tight bbox; ``offset`` is added to the bbox."""
        dense = np.asarray(dense, dtype=bool)
        rows = np.flatnonzero(dense.any(axis=1))
        cols = np.flatnonzero(dense.any(axis=0))
        if rows.size == 0:
            raise RasterError("empty mask")
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        return cls((int(r0 + offset[0]), int(c0 + offset[1]), int(r1 - r0), int(c1 - c0)),
                   dense[r0:r1, c0:c1].copy())

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def to_dense(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        r0, c0, h, w = self.bbox
        out[r0:r0 + h, c0:c0 + w] = self.data
        return out

    def translated(self, drow: int, dcol: int) -> "BinaryMask":
        r0, c0, h, w = self.bbox
        return BinaryMask((r0 + drow, c0 + dcol, h, w), self.data)

    def coords(self) -> np.ndarray:
        """(n, 2) integer array of (row, col) scene coordinates, row-major order."""
        rr, cc = np.nonzero(self.data)
        return np.column_stack([rr + self.bbox[0], cc + self.bbox[1]])

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "rle": rle_encode(self.data)}

    @classmethod
    def from_json(cls, d: dict) -> "BinaryMask":
        r0, c0, h, w = (int(v) for v in d["bbox"])
        return cls((r0, c0, h, w), rle_decode(d["rle"], (h, w)))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bbox == other.bbox and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class Patch:
    origin: tuple[int, int]
    size: int
    values: np.ndarray
    valid: np.ndarray = field(repr=False)


def normalize(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Z-score over valid pixels (population std); invalid pixels become -10.

    A constant input (std < 1e-12) maps every valid pixel to 0. Exact
    constancy is checked directly, since the rounding error of the mean can
    push the computed std of a large constant above the threshold.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if values.shape != valid.shape:
        raise RasterError("values and valid mask differ in shape")
    n = int(valid.sum())
    if n == 0:
        raise RasterError("empty patch")
    v = values[valid]
    mean = v.mean()
    std = v.std()
    out = np.full(values.shape, INVALID_SENTINEL, dtype=np.float64)
    if std < 1e-12 or v.min() == v.max():
        out[valid] = 0.0
    else:
        out[valid] = (v - mean) / std
    return out


def extract_patch(scene: SceneGrid, origin: tuple[int, int], size: int) -> Patch:
    row, col = int(origin[0]), int(origin[1])
    h, w = scene.shape
    if size < 1 or row < 0 or col < 0 or row + size > h or col + size > w:
        raise RasterError(
            f"patch window origin={origin} size={size} out of bounds for scene {h}x{w}"
        )
    sl = (slice(row, row + size), slice(col, col + size))
    valid = scene.valid[sl]
    return Patch(origin=(row, col), size=size, values=normalize(scene.xch4[sl], valid), valid=valid.copy())


# ---------------------------------------------------------------------------
# Run-length encoding
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major alternating run lengths, starting with background (may be 0)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise RasterError("cannot encode an empty array")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    runs = [int(r) for r in runs]
    total = shape[0] * shape[1]
    if any(r < 0 for r in runs) or sum(runs) != total:
        raise RasterError(f"corrupt RLE: runs sum to {sum(runs)}, expected {total}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def mask_from_json(d: dict) -> BinaryMask:
    return BinaryMask.from_json(d)


# ---------------------------------------------------------------------------
# SGRID files
# ---------------------------------------------------------------------------

SGRID_MAGIC = "SGRID"
PGRID_MAGIC = "PGRID"
SGRID_VERSION = 1


def _write_grid(path, magic: str, geometry: GridGeometry, channels: list[tuple[str, np.ndarray]]):
    header = {
        "magic": magic,
        "version": SGRID_VERSION,
        "width": geometry.width,
        "height": geometry.height,
        "pixel_size_m": geometry.pixel_size,
        "channels": [name for name, _ in channels],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for name, arr in channels:
            if name == "valid":
                fh.write(np.asarray(arr, dtype=np.uint8).tobytes(order="C"))
            else:
                fh.write(np.asarray(arr, dtype="<f4").tobytes(order="C"))


def _read_grid(path, magic: str) -> tuple[GridGeometry, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise RasterError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RasterError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise RasterError(f"{path}: magic mismatch (expected {magic!r})")
    if header.get("version") != SGRID_VERSION:
        raise RasterError(f"{path}: unsupported version {header.get('version')!r}")
    try:
        width, height = int(header["width"]), int(header["height"])
        pixel = float(header["pixel_size_m"])
        names = list(header["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RasterError(f"{path}: bad header field: {exc}") from None
    if not (1 <= width <= MAX_DIM and 1 <= height <= MAX_DIM):
        raise RasterError(f"{path}: dimension overflow ({height}x{width})")
    geometry = GridGeometry(width=width, height=height, pixel_size=pixel)
    n = width * height
    payload = memoryview(raw)[nl + 1:]
    sizes = [n if name == "valid" else 4 * n for name in names]
    if len(payload) < sum(sizes):
        raise RasterError(f"{path}: truncated payload ({len(payload)} of {sum(sizes)} bytes)")
    if len(payload) > sum(sizes):
        raise RasterError(f"{path}: payload has {len(payload) - sum(sizes)} trailing bytes")
    out = {}
    pos = 0
    for name, size in zip(names, sizes):
        chunk = payload[pos:pos + size]
        pos += size
        if name == "valid":
            out[name] = np.frombuffer(chunk, dtype=np.uint8).reshape(height, width).astype(bool)
        else:
            out[name] = np.frombuffer(chunk, dtype="<f4").reshape(height, width).astype(np.float64)
    return geometry, out


def save_scene(scene: SceneGrid, path) -> None:
    channels = [("xch4", scene.xch4), ("valid", scene.valid)]
    if scene.albedo is not None:
        channels.append(("albedo", scene.albedo))
    _write_grid(path, SGRID_MAGIC, scene.geometry, channels)


def load_scene(path) -> SceneGrid:
    geometry, ch = _read_grid(path, SGRID_MAGIC)
    if "xch4" not in ch or "valid" not in ch:
        raise RasterError(f"{path}: scene requires xch4 and valid channels")
    return SceneGrid(geometry, ch["xch4"], ch["valid"], ch.get("albedo"))


def save_probability(prob: np.ndarray, geometry: GridGeometry, path) -> None:
    _write_grid(path, PGRID_MAGIC, geometry, [("probability", prob)])


def load_probability(path) -> tuple[GridGeometry, np.ndarray]:
    geometry, ch = _read_grid(path, PGRID_MAGIC)
    return geometry, ch["probability"]
