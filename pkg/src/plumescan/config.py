"""
Toolkit configuration: flat TOML tables, one per stage.

Precedence is command-line flag > config file > built-in default. Every
random stream is derived from the single ``[run] seed`` by a fixed label.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import postproc, qnd, tiler
from .evaluate import DEFAULT_THETA
from .raster import METHANESAT_PIXEL_M, GridGeometry
from .synthgen import ARTIFACT_KINDS, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TilerSection:
    patch_size: int = tiler.DEFAULT_PATCH_SIZE
    overlap: float = tiler.DEFAULT_OVERLAP
    workers: int = 1


@dataclass(frozen=True)
class DetectorSection:
    k: float = 3.0
    min_area: int = 5


@dataclass(frozen=True)
class PostprocSection:
    mode: str = "baseline"
    tau: float = postproc.DEFAULT_TAU
    delta: float = postproc.DEFAULT_DELTA
    fiber_ratio: float = postproc.DEFAULT_FIBER_RATIO
    size_floor: float = postproc.DEFAULT_SIZE_FLOOR
    hp_filter: str = "qnd"
    axis_convention: str = "segment"


@dataclass(frozen=True)
class QndSection:
    eps: float = qnd.DBSCAN_EPS
    min_pts: int = qnd.DBSCAN_MIN_PTS
    percentile: float = qnd.CORE_PERCENTILE
    n_trees: int = 200
    max_depth: int = 12
    model: str = ""  # empty: the bundled model


@dataclass(frozen=True)
class EvalSection:
    theta: float = DEFAULT_THETA


@dataclass(frozen=True)
class ProbmapSection:
    stage: str = "pre_nms"  # detections after tau, before NMS; or "final"


@dataclass(frozen=True)
class SynthSection:
    width: int = 2000
    height: int = 2000
    pixel_size: float = METHANESAT_PIXEL_M
    background_mean: float = 1900.0
    noise_std: float = 2.0
    n_plumes: int = 3
    artifacts: tuple[str, ...] = ARTIFACT_KINDS
    invalid_fraction: float = 0.0
    emission_min: float = 0.9
    emission_max: float = 4.0
    wind_min: float = 1.0
    wind_max: float = 2.0
    spread_a_min: float = 1.0
    spread_a_max: float = 2.0
    spread_b: float = 0.5
    max_range_m: float = 12_000.0
    min_peak_snr: float = 5.0
    with_albedo: bool = True


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


SECTIONS = {
    "run": RunSection,
    "tiler": TilerSection,
    "detector": DetectorSection,
    "postproc": PostprocSection,
    "qnd": QndSection,
    "eval": EvalSection,
    "probmap": ProbmapSection,
    "synth": SynthSection,
}


@dataclass(frozen=True)
class ToolkitConfig:
    run: RunSection = field(default_factory=RunSection)
    tiler: TilerSection = field(default_factory=TilerSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    postproc: PostprocSection = field(default_factory=PostprocSection)
    qnd: QndSection = field(default_factory=QndSection)
    eval: EvalSection = field(default_factory=EvalSection)
    probmap: ProbmapSection = field(default_factory=ProbmapSection)
    synth: SynthSection = field(default_factory=SynthSection)

    def pipeline(self, **overrides) -> postproc.PipelineConfig:
        p = self.postproc
        cfg = postproc.PipelineConfig(
            tau=p.tau, delta=p.delta, fiber_ratio_max=p.fiber_ratio, size_floor=p.size_floor,
            hp_filter=p.hp_filter, mode=p.mode, axis_convention=p.axis_convention,
            dbscan_eps=self.qnd.eps, dbscan_min_pts=self.qnd.min_pts,
            core_percentile=self.qnd.percentile,
        )
        return cfg.with_(**overrides) if overrides else cfg

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        s = self.synth
        return SynthConfig(
            geometry=GridGeometry(s.width, s.height, s.pixel_size),
            background_mean=s.background_mean,
            noise_std=s.noise_std,
            n_random_plumes=s.n_plumes,
            random_artifacts=tuple(s.artifacts),
            invalid_fraction=s.invalid_fraction,
            with_albedo=s.with_albedo,
            emission_range=(s.emission_min, s.emission_max),
            wind_speed_range=(s.wind_min, s.wind_max),
            spread_a_range=(s.spread_a_min, s.spread_a_max),
            spread_b=s.spread_b,
            max_range_m=s.max_range_m,
            min_peak_snr=s.min_peak_snr,
            seed=derive_seed(self.run.seed, "synth") if seed is None else seed,
        )

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec)}
        return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _coerce(sec_name: str, f, value):
    want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if want == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if want == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if want == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if want == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if want.startswith("tuple"):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            return tuple(str(v) for v in value)
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ConfigError(f"[{sec_name}] {f.name}: expected {want}, got {value!r}")


def from_mapping(doc: dict, base: ToolkitConfig | None = None) -> ToolkitConfig:
    cfg = base or ToolkitConfig()
    for sec_name, table in doc.items():
        if sec_name not in SECTIONS:
            raise ConfigError(f"unknown config table [{sec_name}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{sec_name}] must be a table")
        sec = getattr(cfg, sec_name)
        known = {f.name: f for f in fields(sec)}
        updates = {}
        for key, value in table.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{sec_name}]")
            updates[key] = _coerce(sec_name, known[key], value)
        cfg = replace(cfg, **{sec_name: replace(sec, **updates)})
    return cfg


def load_config(path) -> ToolkitConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping(doc)


def with_overrides(cfg: ToolkitConfig, overrides: dict[str, dict[str, Any]]) -> ToolkitConfig:
    """Apply flag values; ``None`` entries mean "flag not given" and are skipped."""
    doc = {sec: {k: v for k, v in table.items() if v is not None} for sec, table in overrides.items()}
    return from_mapping({s: t for s, t in doc.items() if t}, cfg)


def dump_toml(cfg: ToolkitConfig) -> str:
    lines = []
    for sec, table in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in table.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit stream seed for ``label`` under the master ``seed``."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
