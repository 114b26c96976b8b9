"""
Quantile Normality Deviation (QND) features for plume/artifact classification.

For a sample X with mean mu and std sigma, the QND curve is

    D_i = | #{x_j <= x_i} / N - Phi((x_i - mu) / sigma) |,   i = 1..100,

with x_i the i-th percentile of X (linear interpolation). A degree-6
polynomial in i is fitted to the curve and summarized by its values at
selected percentiles and at its critical points inside [1, 99].

Feature vector (fixed order): contrast, z_score, intensity of the DBSCAN
hotspot core; CH4 curve at p50; albedo curve at p50 and p90; min/max/mean of
the CH4 polynomial at its critical points; the same triple for albedo.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial import polynomial as P
from scipy.spatial import cKDTree
from scipy.special import erfc

from .raster import BinaryMask, SceneGrid

DBSCAN_EPS = 10.0
DBSCAN_MIN_PTS = 25
CORE_PERCENTILE = 98.0
MIN_CURVE_SAMPLES = 30
PERCENTILES = np.arange(1, 101, dtype=np.float64)

FEATURE_ORDER = (
    "contrast", "z_score", "intensity",
    "qnd_ch4_p50", "qnd_alb_p50", "qnd_alb_p90",
    "ch4_crit_min", "ch4_crit_max", "ch4_crit_mean",
    "alb_crit_min", "alb_crit_max", "alb_crit_mean",
)


class QndError(ValueError):
    pass


@dataclass(frozen=True)
class CoreMetrics:
    contrast: float
    z_score: float
    intensity: float


@dataclass(frozen=True, eq=False)
class QndCurve:
    D: np.ndarray
    percentiles: np.ndarray  # x_i
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class Poly6Fit:
    coeffs: tuple[float, ...]  # ascending powers of the percentile index
    rms: float


@dataclass(frozen=True)
class PolyDescriptors:
    p50: float
    p90: float
    crit_min: float
    crit_max: float
    crit_mean: float
    critical_points: tuple[float, ...]


@dataclass(frozen=True)
class QndFeatures:
    contrast: float
    z_score: float
    intensity: float
    qnd_ch4_p50: float
    qnd_alb_p50: float
    qnd_alb_p90: float
    ch4_crit_min: float
    ch4_crit_max: float
    ch4_crit_mean: float
    alb_crit_min: float
    alb_crit_max: float
    alb_crit_mean: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels (-1 = noise) for an (n, d) array.

    Neighborhoods are closed balls (distance <= eps) that include the point
    itself. Points are scanned in index order and each cluster is expanded
    completely before the next starts, so a border point reachable from two
    clusters joins the one started first.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    # Small tolerance so integer-grid distances exactly equal to eps count.
    neigh = tree.query_ball_point(pts, r=eps * (1 + 1e-12))
    core = np.array([len(nb) >= min_pts for nb in neigh])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = [i]
        while queue:
            j = queue.pop()
            for k in neigh[j]:
                if labels[k] == -1:
                    labels[k] = cluster
                    if core[k] and not visited[k]:
                        visited[k] = True
                        queue.append(k)
        cluster += 1
    return labels


def plume_core(scene: SceneGrid, mask: BinaryMask, eps: float = DBSCAN_EPS,
               min_pts: int = DBSCAN_MIN_PTS, q: float = CORE_PERCENTILE) -> tuple[np.ndarray, CoreMetrics]:
    """Largest DBSCAN cluster of above-percentile pixels and its contrast metrics.

    Returns a boolean array over the mask's valid pixels (in ``mask.coords()``
    order, restricted to valid) marking the core.
    """
    coords = mask.coords()
    ok = scene.valid[coords[:, 0], coords[:, 1]]
    coords = coords[ok]
    if len(coords) < min_pts:
        raise QndError(f"mask has {len(coords)} valid pixels, need >= {min_pts}")
    values = scene.xch4[coords[:, 0], coords[:, 1]]
    thr = percentile_sorted(np.sort(values), q)
    hot = np.flatnonzero(values >= thr)
    labels = dbscan(coords[hot], eps, min_pts)
    if labels.max() < 0:
        raise QndError("no hotspot core")
    sizes = np.bincount(labels[labels >= 0])
    biggest = int(np.argmax(sizes))
    core = np.zeros(len(coords), dtype=bool)
    core[hot[labels == biggest]] = True
    rest = values[~core]
    if rest.size == 0:
        raise QndError("no background pixels outside the core")
    mu_mask = float(values[core].mean())
    mu_b = float(rest.mean())
    sd_b = float(rest.std())
    intensity = mu_mask - mu_b
    contrast = mu_mask / mu_b if mu_b != 0 else math.inf
    if sd_b > 0:
        z = intensity / sd_b
    else:
        z = 0.0 if intensity == 0 else math.copysign(math.inf, intensity)
    return core, CoreMetrics(contrast, z, intensity)


# ---------------------------------------------------------------------------
# QND curve and polynomial descriptors
# ---------------------------------------------------------------------------

def percentile_sorted(x: np.ndarray, q) -> np.ndarray:
    """Inclusive linear-interpolation percentiles of an ascending array.

    The rank (n - 1) * q / 100 is formed as an integer multiple before the
    division, so integral percentiles land exactly on order statistics.
    """
    q = np.asarray(q, dtype=np.float64)
    num = (x.size - 1) * q
    lo = np.floor(num / 100.0).astype(np.int64)
    frac = (num - 100.0 * lo) / 100.0
    hi = np.minimum(lo + 1, x.size - 1)
    return x[lo] + (x[hi] - x[lo]) * frac


def normal_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=np.float64) / math.sqrt(2.0))


def qnd_curve(values) -> QndCurve:
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    if n < MIN_CURVE_SAMPLES:
        raise QndError(f"need >= {MIN_CURVE_SAMPLES} samples, got {n}")
    mu = float(x.mean())
    sigma = float(x.std())
    if not sigma > 0:
        raise QndError("degenerate distribution")
    xi = percentile_sorted(x, PERCENTILES)
    ecdf = np.searchsorted(x, xi, side="right") / n
    D = np.abs(ecdf - normal_cdf((xi - mu) / sigma))
    return QndCurve(D, xi, mu, sigma, n)


def fit_poly6(curve: QndCurve | np.ndarray) -> Poly6Fit:
    D = curve.D if isinstance(curve, QndCurve) else np.asarray(curve, dtype=np.float64)
    if D.shape != (100,):
        raise QndError("expected a 100-point curve")
    fit = Polynomial.fit(PERCENTILES, D, 6)
    resid = D - fit(PERCENTILES)
    coeffs = fit.convert().coef
    coeffs = np.pad(coeffs, (0, 7 - coeffs.size))
    return Poly6Fit(tuple(float(c) for c in coeffs), float(np.sqrt(np.mean(resid ** 2))))


def critical_points(coeffs, lo: float = 1.0, hi: float = 99.0, step: float = 0.01,
                    tol: float = 1e-8) -> list[float]:
    """Real roots of the derivative in [lo, hi]: sign bracketing plus bisection."""
    d = P.polyder(np.asarray(coeffs, dtype=np.float64))
    if not np.any(d):
        return []
    grid = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    vals = P.polyval(grid, d)
    roots = []
    for i in range(len(grid) - 1):
        a, b = grid[i], grid[i + 1]
        fa, fb = vals[i], vals[i + 1]
        if fa == 0.0:
            roots.append(float(a))
            continue
        if fa * fb < 0:
            while b - a > tol:
                m = 0.5 * (a + b)
                fm = P.polyval(m, d)
                if fm == 0.0:
                    a = b = m
                    break
                if (fm < 0) == (fa < 0):
                    a, fa = m, fm
                else:
                    b = m
            roots.append(float(0.5 * (a + b)))
    if vals[-1] == 0.0:
        roots.append(float(grid[-1]))
    return roots


def poly_descriptors(coeffs) -> PolyDescriptors:
    c = np.asarray(coeffs, dtype=np.float64)
    roots = critical_points(c)
    at = roots if roots else [1.0, 99.0]
    vals = P.polyval(np.asarray(at), c)
    return PolyDescriptors(
        p50=float(P.polyval(50.0, c)),
        p90=float(P.polyval(90.0, c)),
        crit_min=float(vals.min()),
        crit_max=float(vals.max()),
        crit_mean=float(vals.mean()),
        critical_points=tuple(roots),
    )


def _curve_descriptors(values) -> PolyDescriptors:
    return poly_descriptors(fit_poly6(qnd_curve(values)).coeffs)


# Albedo-free scenes: constant proxy field, so the curve is identically zero.
_DEGENERATE = PolyDescriptors(0.0, 0.0, 0.0, 0.0, 0.0, ())


def extract_features(scene: SceneGrid, mask: BinaryMask, eps: float = DBSCAN_EPS,
                     min_pts: int = DBSCAN_MIN_PTS, q: float = CORE_PERCENTILE) -> QndFeatures:
    _, core = plume_core(scene, mask, eps, min_pts, q)
    coords = mask.coords()
    coords = coords[scene.valid[coords[:, 0], coords[:, 1]]]
    ch4 = _curve_descriptors(scene.xch4[coords[:, 0], coords[:, 1]])
    if scene.albedo is None:
        alb = _DEGENERATE
    else:
        try:
            alb = _curve_descriptors(scene.albedo[coords[:, 0], coords[:, 1]])
        except QndError:
            alb = _DEGENERATE
    feats = QndFeatures(
        core.contrast, core.z_score, core.intensity,
        ch4.p50, alb.p50, alb.p90,
        ch4.crit_min, ch4.crit_max, ch4.crit_mean,
        alb.crit_min, alb.crit_max, alb.crit_mean,
    )
    if not np.all(np.isfinite(feats.to_array())):
        raise QndError("non-finite features")
    return feats
