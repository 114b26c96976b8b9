"""
Labeled synthetic scenes: noisy XCH4 background, injected surrogate plumes and
hard-negative artifacts (stripes, cloud patches, small and dispersed
enhancements).

The plume surrogate is a steady-state 2-D Gaussian plume

    dX(x, y) = K * Q / (sqrt(2 pi) * sigma_y(x) * u) * exp(-y^2 / (2 sigma_y(x)^2)),
    sigma_y(x) = a * x**b,   x > 0 downwind,

averaged over a symmetric sub-pixel grid so narrow near-source plumes are not
aliased. ``K`` is fixed so that Q = 1 t/h, u = 3 m/s, a = 0.08, b = 0.9 gives a
centerline enhancement of 100 ppb at x = 200 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .raster import BinaryMask, GridGeometry, SceneGrid

DEFAULT_SPREAD_A = 0.08
DEFAULT_SPREAD_B = 0.9
EMISSION_RANGE_TPH = (0.9, 4.0)
MAX_BAD_PIXEL_FRACTION = 0.20
PLACEMENT_RETRIES = 100
ARTIFACT_KINDS = ("stripe", "cloud_patch", "small_enhancement", "dispersed_enhancement")

_SQRT_2PI = math.sqrt(2.0 * math.pi)
CALIBRATION_K = 100.0 * _SQRT_2PI * DEFAULT_SPREAD_A * 200.0 ** DEFAULT_SPREAD_B * 3.0

_EIGHT = np.ones((3, 3), dtype=bool)


class PlacementError(ValueError):
    """A plume or artifact placement violated a constraint."""


@dataclass(frozen=True)
class PlumeSpec:
    source: tuple[int, int]
    emission_rate: float  # t/h
    wind_direction: float = 0.0  # degrees clockwise from grid north
    wind_speed: float = 3.0  # m/s
    spread_a: float = DEFAULT_SPREAD_A
    spread_b: float = DEFAULT_SPREAD_B
    max_range_m: float = 10_000.0

    def __post_init__(self):
        if not self.wind_speed > 0:
            raise ValueError(f"wind speed must be > 0, got {self.wind_speed}")
        if not self.spread_a > 0 or not 0 < self.spread_b <= 1:
            raise ValueError(f"invalid spread coefficients a={self.spread_a} b={self.spread_b}")
        if self.emission_rate < 0:
            raise ValueError("emission rate must be >= 0")


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str
    amplitude: float  # ppb
    placement: tuple[int, int]  # (row, col); stripes use row only
    extent: int  # px

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise ValueError(f"unknown artifact kind {self.kind!r}")
        if not self.amplitude > 0 or self.extent < 1:
            raise ValueError("artifact amplitude must be > 0 and extent >= 1")

    def to_json(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude,
                "placement": list(self.placement), "extent": self.extent}


@dataclass(frozen=True)
class PlumeLabel:
    mask: BinaryMask
    source: tuple[int, int]
    emission_rate: float

    def to_json(self) -> dict:
        return {"mask": self.mask.to_json(), "source": list(self.source),
                "emission_rate_tph": self.emission_rate}

    @classmethod
    def from_json(cls, d: dict) -> "PlumeLabel":
        return cls(BinaryMask.from_json(d["mask"]), tuple(int(v) for v in d["source"]),
                   float(d["emission_rate_tph"]))


@dataclass(frozen=True)
class SynthConfig:
    geometry: GridGeometry = field(default_factory=lambda: GridGeometry(512, 512))
    background_mean: float = 1900.0
    noise_std: float = 35.0
    plumes: tuple[PlumeSpec, ...] = ()
    artifacts: tuple[ArtifactSpec, ...] = ()
    n_random_plumes: int = 0
    random_artifacts: tuple[str, ...] = ()
    invalid_fraction: float = 0.0
    with_albedo: bool = True
    emission_range: tuple[float, float] = EMISSION_RANGE_TPH
    wind_speed_range: tuple[float, float] = (2.0, 5.0)
    spread_a_range: tuple[float, float] = (DEFAULT_SPREAD_A, DEFAULT_SPREAD_A)
    spread_b: float = DEFAULT_SPREAD_B
    max_range_m: float = 10_000.0
    artifact_snr: float = 6.0
    min_peak_snr: float = 0.0  # random plumes below this are resampled
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.background_mean > 0:
            raise ValueError("background_mean must be > 0")
        if not 0 <= self.invalid_fraction < 1:
            raise ValueError("invalid_fraction must lie in [0, 1)")
        for kind in self.random_artifacts:
            if kind not in ARTIFACT_KINDS:
                raise ValueError(f"unknown artifact kind {kind!r}")


def label_floor(noise_std: float) -> float:
    """Enhancement (ppb) above which plume pixels are labeled; 1 ppb when noise-free."""
    return noise_std if noise_std > 0 else 1.0


# ---------------------------------------------------------------------------
# Plume field
# ---------------------------------------------------------------------------

def gaussian_plume_field(spec: PlumeSpec, geometry: GridGeometry, supersample: int = 5) -> np.ndarray:
    """Pixel-averaged enhancement (ppb) of one plume over the whole grid."""
    h, w = geometry.shape
    sr, sc = spec.source
    if not (0 <= sr < h and 0 <= sc < w):
        raise ValueError(f"plume source {spec.source} outside {h}x{w} grid")
    out = np.zeros((h, w), dtype=np.float64)
    if spec.emission_rate == 0:
        return out
    px = geometry.pixel_size
    reach = int(math.ceil(spec.max_range_m / px)) + 1
    r0, r1 = max(0, sr - reach), min(h, sr + reach + 1)
    c0, c1 = max(0, sc - reach), min(w, sc + reach + 1)

    theta = math.radians(spec.wind_direction)
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    rows = np.arange(r0, r1) - sr
    cols = np.arange(c0, c1) - sc
    scale = CALIBRATION_K * spec.emission_rate / (_SQRT_2PI * spec.wind_speed)

    acc = np.zeros((r1 - r0, c1 - c0), dtype=np.float64)
    for dr in offsets:
        north = -(rows[:, None] + dr) * px
        for dc in offsets:
            east = (cols[None, :] + dc) * px
            x = east * sin_t + north * cos_t
            y = east * cos_t - north * sin_t
            inside = (x > 0) & (x <= spec.max_range_m)
            xs = np.where(inside, x, 1.0)
            sigma = spec.spread_a * xs ** spec.spread_b
            val = scale / sigma * np.exp(-0.5 * (y / sigma) ** 2)
            acc += np.where(inside, val, 0.0)
    out[r0:r1, c0:c1] = acc / supersample ** 2
    return out


def peak_snr(field_ppb: np.ndarray, noise_std: float) -> float:
    return float(field_ppb.max() / noise_std) if noise_std > 0 else math.inf


def _plume_footprint(field_ppb: np.ndarray, source: tuple[int, int], floor: float) -> np.ndarray:
    above = field_ppb >= floor
    lab, n = ndimage.label(above, structure=_EIGHT)
    if n == 0:
        raise PlacementError("plume enhancement never reaches the labeling floor")
    keep = lab[source]
    if keep == 0:
        sizes = np.bincount(lab.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
    return lab == keep


def inject_plume(
    scene: SceneGrid,
    spec: PlumeSpec,
    *,
    floor: float,
    existing: Sequence[PlumeLabel] = (),
    field_ppb: np.ndarray | None = None,
) -> tuple[SceneGrid, PlumeLabel]:
    """Add a plume to valid pixels; raises PlacementError on constraint violation."""
    if field_ppb is None:
        field_ppb = gaussian_plume_field(spec, scene.geometry)
    footprint = _plume_footprint(field_ppb, spec.source, floor)
    bad = 1.0 - scene.valid[footprint].mean()
    if bad >= MAX_BAD_PIXEL_FRACTION:
        raise PlacementError(f"bad-pixel fraction {bad:.2f} inside plume footprint")
    for lab in existing:
        r0, c0, hh, ww = lab.mask.bbox
        if np.any(footprint[r0:r0 + hh, c0:c0 + ww] & lab.mask.data):
            raise PlacementError("plume footprint overlaps a previously injected plume")
    xch4 = np.where(scene.valid, scene.xch4 + field_ppb, scene.xch4)
    label = PlumeLabel(BinaryMask.from_dense(footprint), tuple(spec.source), float(spec.emission_rate))
    return scene.replace(xch4=xch4), label


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _gaussian_bump(shape, center, sigma) -> np.ndarray:
    rr = np.arange(shape[0])[:, None] - center[0]
    cc = np.arange(shape[1])[None, :] - center[1]
    return np.exp(-(rr ** 2 + cc ** 2) / (2.0 * sigma ** 2))


def _disk(shape, center, radius) -> np.ndarray:
    rr = np.arange(shape[0])[:, None] - center[0]
    cc = np.arange(shape[1])[None, :] - center[1]
    return rr ** 2 + cc ** 2 <= radius ** 2


def artifact_footprint(spec: ArtifactSpec, shape: tuple[int, int], margin: int = 0) -> np.ndarray:
    """Pixels an artifact perturbs, grown by ``margin`` (used for placement exclusion)."""
    r, c = spec.placement
    if spec.kind == "stripe":
        out = np.zeros(shape, dtype=bool)
        out[max(0, r - margin):r + spec.extent + margin, :] = True
        return out
    if spec.kind == "cloud_patch":
        radius = spec.extent + 3
    elif spec.kind == "small_enhancement":
        radius = 2 * min(spec.extent, 8)
    else:
        radius = 3 * spec.extent
    return _disk(shape, (r, c), radius + margin)


def inject_artifact(scene: SceneGrid, spec: ArtifactSpec, *, noise_std: float = 35.0) -> SceneGrid:
    h, w = scene.shape
    r, c = spec.placement
    if not (0 <= r < h and (spec.kind == "stripe" or 0 <= c < w)):
        raise ValueError(f"artifact placement {spec.placement} outside {h}x{w} grid")
    xch4 = scene.xch4.copy()
    valid = scene.valid.copy()
    albedo = None if scene.albedo is None else scene.albedo.copy()

    if spec.kind == "stripe":
        band = slice(r, min(h, r + spec.extent))
        xch4[band, :] += spec.amplitude
    elif spec.kind == "cloud_patch":
        blob = _disk((h, w), (r, c), spec.extent)
        rim = _disk((h, w), (r, c), spec.extent + 3) & ~blob
        valid &= ~blob
        xch4[rim] += spec.amplitude
        xch4[blob] = 0.0
        if albedo is not None:
            albedo[rim] = np.minimum(1.0, albedo[rim] + 0.3)
    elif spec.kind == "small_enhancement":
        fwhm = min(float(spec.extent), 8.0)
        bump = _gaussian_bump((h, w), (r, c), fwhm / 2.3548)
        xch4 += spec.amplitude * bump
        if albedo is not None:
            albedo = np.minimum(1.0, albedo + 0.35 * bump)
    else:
        amp = min(spec.amplitude, 1.5 * noise_std) if noise_std > 0 else spec.amplitude
        bump = _gaussian_bump((h, w), (r, c), float(spec.extent))
        xch4 += amp * bump
        if albedo is not None:
            albedo = np.clip(albedo - 0.15 * bump, 0.0, 1.0)
    xch4 = np.where(valid, xch4, 0.0)
    return SceneGrid(scene.geometry, xch4, valid, albedo)


# ---------------------------------------------------------------------------
# Scene composition
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, shape, cell: int) -> np.ndarray:
    coarse = rng.standard_normal((shape[0] // cell + 2, shape[1] // cell + 2))
    fine = ndimage.zoom(coarse, cell, order=1)[: shape[0], : shape[1]]
    return fine


def _background(cfg: SynthConfig, rng: np.random.Generator):
    shape = cfg.geometry.shape
    xch4 = cfg.background_mean + cfg.noise_std * rng.standard_normal(shape)
    valid = np.ones(shape, dtype=bool)
    if cfg.invalid_fraction > 0:
        blobs = _smooth_field(rng, shape, 24)
        valid = blobs > np.quantile(blobs, cfg.invalid_fraction)
    albedo = None
    if cfg.with_albedo:
        a = _smooth_field(rng, shape, 64)
        a = (a - a.min()) / max(a.max() - a.min(), 1e-12)
        albedo = 0.08 + 0.35 * a
    xch4 = np.where(valid, xch4, 0.0)
    return SceneGrid(cfg.geometry, xch4, valid, albedo)


def _random_plume(cfg: SynthConfig, rng: np.random.Generator) -> PlumeSpec:
    h, w = cfg.geometry.shape
    margin = max(2, min(h, w) // 20)
    return PlumeSpec(
        source=(int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin))),
        emission_rate=float(rng.uniform(*cfg.emission_range)),
        wind_direction=float(rng.uniform(0.0, 360.0)),
        wind_speed=float(rng.uniform(*cfg.wind_speed_range)),
        spread_a=float(rng.uniform(*cfg.spread_a_range)),
        spread_b=cfg.spread_b,
        max_range_m=cfg.max_range_m,
    )


def _random_artifact(cfg: SynthConfig, kind: str, rng: np.random.Generator) -> ArtifactSpec:
    h, w = cfg.geometry.shape
    noise = cfg.noise_std if cfg.noise_std > 0 else 10.0
    if kind == "stripe":
        return ArtifactSpec(kind, 0.6 * cfg.artifact_snr * noise, (int(rng.integers(0, h - 3)), 0),
                            int(rng.integers(1, 4)))
    margin = 40
    pos = (int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin)))
    if kind == "cloud_patch":
        return ArtifactSpec(kind, cfg.artifact_snr * noise, pos, int(rng.integers(6, 16)))
    if kind == "small_enhancement":
        return ArtifactSpec(kind, cfg.artifact_snr * noise, pos, int(rng.integers(3, 9)))
    return ArtifactSpec(kind, 1.5 * noise, pos, int(rng.integers(12, 25)))


def _overlaps(footprint: np.ndarray, labels: Iterable[PlumeLabel]) -> bool:
    for lab in labels:
        r0, c0, hh, ww = lab.mask.bbox
        if np.any(footprint[r0:r0 + hh, c0:c0 + ww] & lab.mask.data):
            return True
    return False


def generate_scene(cfg: SynthConfig) -> tuple[SceneGrid, list[PlumeLabel], list[ArtifactSpec]]:
    """Deterministic scene for ``cfg.seed``; values quantized to float32 precision."""
    rng = np.random.default_rng(cfg.seed)
    scene = _background(cfg, rng)
    floor = label_floor(cfg.noise_std)
    labels: list[PlumeLabel] = []

    for spec in cfg.plumes:
        scene, lab = inject_plume(scene, spec, floor=floor, existing=labels)
        labels.append(lab)
    for _ in range(cfg.n_random_plumes):
        for _attempt in range(PLACEMENT_RETRIES):
            spec = _random_plume(cfg, rng)
            field_ppb = gaussian_plume_field(spec, cfg.geometry)
            if cfg.noise_std > 0 and peak_snr(field_ppb, cfg.noise_std) < cfg.min_peak_snr:
                continue
            try:
                scene, lab = inject_plume(scene, spec, floor=floor, existing=labels, field_ppb=field_ppb)
            except PlacementError:
                continue
            labels.append(lab)
            break
        else:
            raise PlacementError("placement exhausted")

    artifacts: list[ArtifactSpec] = []
    taken = np.zeros(cfg.geometry.shape, dtype=bool)
    for spec in cfg.artifacts:
        scene = inject_artifact(scene, spec, noise_std=cfg.noise_std)
        artifacts.append(spec)
        taken |= artifact_footprint(spec, cfg.geometry.shape)
    for kind in cfg.random_artifacts:
        for _attempt in range(PLACEMENT_RETRIES):
            spec = _random_artifact(cfg, kind, rng)
            fp = artifact_footprint(spec, cfg.geometry.shape)
            grown = artifact_footprint(spec, cfg.geometry.shape, margin=8)
            if _overlaps(grown, labels) or np.any(grown & taken):
                continue
            scene = inject_artifact(scene, spec, noise_std=cfg.noise_std)
            artifacts.append(spec)
            taken |= fp
            break
        else:
            raise PlacementError("placement exhausted")

    xch4 = scene.xch4.astype(np.float32).astype(np.float64)
    albedo = None if scene.albedo is None else scene.albedo.astype(np.float32).astype(np.float64)
    return SceneGrid(scene.geometry, xch4, scene.valid, albedo), labels, artifacts


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)
