"""
Seeded synthetic benchmark and QND training-set construction.

The benchmark regime (weak wind, broad slowly-widening plumes, 2 ppb noise)
lives in the ``[synth]`` defaults of :class:`ToolkitConfig`. Every stage
downstream of the scene is invariant to an affine rescaling of XCH4 except
the labeling floor, which tracks noise_std, so only signal-to-noise matters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .config import ToolkitConfig, derive_seed
from .detector import Instance, make_oracle
from .evaluate import MetricsReport, pooled_metrics
from .postproc import MODES, mask_intersection, run_high_sensitivity
from .postproc import run_mode as _run_mode
from .qnd import FEATURE_ORDER, QndError, extract_features
from .raster import BinaryMask, SceneGrid
from .synthgen import ArtifactSpec, PlumeLabel, artifact_footprint, generate_scene
from .tiler import run_scene

log = logging.getLogger(__name__)

N_BENCHMARK_SCENES = 20
BENCHMARK_LABEL = "benchmark"
TRAINING_LABEL = "qnd-train"
TRAINING_MIN_AREA = 1500


@dataclass(frozen=True, eq=False)
class BenchmarkCase:
    scene: SceneGrid
    labels: tuple[PlumeLabel, ...]
    artifacts: tuple[ArtifactSpec, ...]
    detections: tuple[Instance, ...]


def case_seed(master: int, index: int, label: str = BENCHMARK_LABEL) -> int:
    return derive_seed(master, f"{label}:{index}")


def detect(scene: SceneGrid, tk: ToolkitConfig) -> tuple[Instance, ...]:
    oracle = make_oracle(tk.detector.k, tk.detector.min_area)
    return run_scene(scene, oracle, tk.tiler.patch_size, tk.tiler.overlap, tk.tiler.workers).instances


def benchmark_cases(n: int = N_BENCHMARK_SCENES, tk: ToolkitConfig | None = None,
                    label: str = BENCHMARK_LABEL) -> Iterator[BenchmarkCase]:
    tk = tk or ToolkitConfig()
    for i in range(n):
        scene, labels, artifacts = generate_scene(tk.synth_config(case_seed(tk.run.seed, i, label)))
        yield BenchmarkCase(scene, tuple(labels), tuple(artifacts), detect(scene, tk))


def evaluate_modes(cases: Sequence[BenchmarkCase], tk: ToolkitConfig, classifier=None,
                   modes: Sequence[str] = MODES) -> dict[str, MetricsReport]:
    out = {}
    for mode in modes:
        cfg = tk.pipeline(mode=mode)
        pooled = [(_run_mode(c.detections, c.scene, cfg, classifier), c.labels) for c in cases]
        out[mode] = pooled_metrics(pooled, tk.eval.theta, mode=mode,
                                   thresholds=(cfg.tau, cfg.delta, tk.eval.theta))
    return out


# ---------------------------------------------------------------------------
# QND training data
# ---------------------------------------------------------------------------

def artifact_region(spec: ArtifactSpec, scene: SceneGrid, rng: np.random.Generator,
                    min_area: int = TRAINING_MIN_AREA) -> BinaryMask:
    """A detection-sized mask around an artifact, holding at least ``min_area`` valid pixels."""
    h, w = scene.shape
    if spec.kind == "stripe":
        rows = max(1, min(spec.extent, h - spec.placement[0]))
        length = min(w, int(math.ceil(min_area / rows)))
        c0 = int(rng.integers(0, w - length + 1))
        dense = np.zeros((rows, length), dtype=bool)
        dense[:] = True
        return BinaryMask((spec.placement[0], c0, rows, length), dense)
    fp = artifact_footprint(spec, scene.shape)
    margin = 0
    while int(np.count_nonzero(fp & scene.valid)) < min_area:
        margin += 2
        fp = artifact_footprint(spec, scene.shape, margin=margin)
    return BinaryMask.from_dense(fp & scene.valid)


def training_samples(case: BenchmarkCase, tk: ToolkitConfig, rng: np.random.Generator):
    """(features, label) pairs, label 1 = plume, 0 = artifact.

    Plumes contribute their ground-truth masks and every high-sensitivity
    detection touching them; artifacts contribute a detection-sized region
    around each injected artifact and any detection touching only artifacts.
    Masks whose features cannot be extracted are skipped.
    """
    q = tk.qnd
    masks: list[tuple[BinaryMask, int]] = [(lab.mask, 1) for lab in case.labels]
    masks += [(artifact_region(a, case.scene, rng), 0) for a in case.artifacts]
    hs = run_high_sensitivity(case.detections, tk.pipeline(mode="high_sensitivity"))
    for d in hs:
        if any(mask_intersection(d.mask, lab.mask) for lab in case.labels):
            masks.append((d.mask, 1))
            continue
        for a in case.artifacts:
            fp = artifact_footprint(a, case.scene.shape, margin=3)
            r, c, hh, ww = d.bbox
            if np.any(fp[r:r + hh, c:c + ww] & d.mask.data):
                masks.append((d.mask, 0))
                break
    out = []
    for mask, y in masks:
        try:
            f = extract_features(case.scene, mask, q.eps, q.min_pts, q.percentile)
        except QndError as exc:
            log.debug("training sample skipped: %s", exc)
            continue
        out.append((f.to_array(), y))
    return out


def build_training_set(n_scenes: int, tk: ToolkitConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    tk = tk or ToolkitConfig()
    rng = np.random.default_rng(derive_seed(tk.run.seed, f"{TRAINING_LABEL}:regions"))
    X, y = [], []
    for case in benchmark_cases(n_scenes, tk, TRAINING_LABEL):
        for f, lab in training_samples(case, tk, rng):
            X.append(f)
            y.append(lab)
    if not X:
        return np.zeros((0, len(FEATURE_ORDER))), np.zeros(0, dtype=np.int64)
    return np.vstack(X), np.asarray(y, dtype=np.int64)
