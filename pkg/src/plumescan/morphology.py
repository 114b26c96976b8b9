"""
Skeleton-based shape measurements used by the fiber filter.

Fiber length is the geodesic diameter of the Zhang-Suen skeleton (8-connected,
diagonal steps of length sqrt(2)). It is compared against a major-axis length
derived from the second-order central moments of the full mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

MIN_SKELETON_AREA = 5

# Neighbor offsets P2..P9, clockwise from north.
_NEIGHBORS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


class MorphologyError(ValueError):
    pass


@dataclass(frozen=True)
class MorphologyReport:
    fiber_length: float
    major_axis: float
    ratio: float
    skeleton_pixels: int


def _neighbor_planes(img: np.ndarray) -> list[np.ndarray]:
    p = np.pad(img, 1)
    h, w = img.shape
    return [p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] for dr, dc in _NEIGHBORS]


def _zs_pass(img: np.ndarray, first: bool) -> np.ndarray:
    P2, P3, P4, P5, P6, P7, P8, P9 = nb = _neighbor_planes(img)
    count = sum(n.astype(np.uint8) for n in nb)
    cyc = nb + nb[:1]
    transitions = sum((~cyc[i] & cyc[i + 1]).astype(np.uint8) for i in range(8))
    if first:
        c3 = ~(P2 & P4 & P6)
        c4 = ~(P4 & P6 & P8)
    else:
        c3 = ~(P2 & P4 & P8)
        c4 = ~(P2 & P6 & P8)
    return img & (count >= 2) & (count <= 6) & (transitions == 1) & c3 & c4


def zhang_suen(mask: np.ndarray) -> np.ndarray:
    img = np.asarray(mask, dtype=bool).copy()
    while True:
        changed = False
        for first in (True, False):
            kill = _zs_pass(img, first)
            if kill.any():
                img &= ~kill
                changed = True
        if not changed:
            return img


@lru_cache(maxsize=None)
def _simple_table() -> np.ndarray:
    """For each 8-bit neighborhood: True if removing the center keeps topology.

    Simple = exactly one 8-connected foreground component among the
    neighbors and at least one 4-neighbor in the background.
    """
    table = np.zeros(256, dtype=bool)
    for code in range(256):
        on = [i for i in range(8) if code >> i & 1]
        if not on:
            continue
        seen = {on[0]}
        stack = [on[0]]
        while stack:
            i = stack.pop()
            ri, ci = _NEIGHBORS[i]
            for j in on:
                if j not in seen:
                    rj, cj = _NEIGHBORS[j]
                    if max(abs(ri - rj), abs(ci - cj)) == 1:
                        seen.add(j)
                        stack.append(j)
        border = any(not code >> i & 1 for i in (0, 2, 4, 6))
        table[code] = len(seen) == len(on) and border
    return table


def _prune_staircases(skel: np.ndarray) -> np.ndarray:
    """Drop corner pixels of 4-connected staircases left by Zhang-Suen."""
    table = _simple_table()
    skel = skel.copy()
    h, w = skel.shape
    changed = True
    while changed:
        changed = False
        for r, c in zip(*np.nonzero(skel)):
            code = 0
            for i, (dr, dc) in enumerate(_NEIGHBORS):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and skel[rr, cc]:
                    code |= 1 << i
            n_on = bin(code).count("1")
            if n_on < 2 or not table[code]:
                continue
            north, east, south, west = (code >> 0 & 1, code >> 2 & 1, code >> 4 & 1, code >> 6 & 1)
            if (north and east) or (east and south) or (south and west) or (west and north):
                skel[r, c] = False
                changed = True
    return skel


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """One-pixel-wide 8-connected skeleton of a binary mask.

    Zhang-Suen thinning followed by removal of redundant staircase corners.
    A component that thins away entirely (e.g. a 2x2 block) keeps the pixel
    nearest its centroid.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MorphologyError("empty mask")
    skel = _prune_staircases(zhang_suen(mask))
    if not skel.any():
        rr, cc = np.nonzero(mask)
        d = (rr - rr.mean()) ** 2 + (cc - cc.mean()) ** 2
        i = int(np.argmin(d))
        skel[rr[i], cc[i]] = True
    return skel


def skeleton_graph(skel: np.ndarray) -> sparse.csr_matrix:
    """Weighted 8-neighbor adjacency over skeleton pixels (row-major order)."""
    idx = -np.ones(skel.shape, dtype=np.int64)
    rr, cc = np.nonzero(skel)
    idx[rr, cc] = np.arange(rr.size)
    h, w = skel.shape
    src, dst, wt = [], [], []
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
        r2, c2 = rr + dr, cc + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        j = np.full(rr.size, -1)
        j[ok] = idx[r2[ok], c2[ok]]
        hit = j >= 0
        src.append(np.flatnonzero(hit))
        dst.append(j[hit])
        wt.append(np.full(int(hit.sum()), math.sqrt(2.0) if dr and dc else 1.0))
    src, dst, wt = np.concatenate(src), np.concatenate(dst), np.concatenate(wt)
    n = rr.size
    g = sparse.coo_matrix((wt, (src, dst)), shape=(n, n))
    return (g + g.T).tocsr()


def geodesic_diameter(skel: np.ndarray) -> float:
    """Longest shortest path over the skeleton graph (double Dijkstra sweep per component)."""
    n = int(skel.sum())
    if n <= 1:
        return 0.0
    g = skeleton_graph(skel)
    ncomp, comp = csgraph.connected_components(g, directed=False)
    best = 0.0
    for k in range(ncomp):
        start = int(np.flatnonzero(comp == k)[0])
        d = csgraph.dijkstra(g, directed=False, indices=start)
        far = int(np.argmax(np.where(np.isfinite(d), d, -1.0)))
        d = csgraph.dijkstra(g, directed=False, indices=far)
        best = max(best, float(np.max(d[np.isfinite(d)])))
    return best


def exact_geodesic_diameter(skel: np.ndarray) -> float:
    """All-pairs reference for small skeletons."""
    if int(skel.sum()) <= 1:
        return 0.0
    d = csgraph.dijkstra(skeleton_graph(skel), directed=False)
    return float(np.max(d[np.isfinite(d)]))


def major_axis_length(mask: np.ndarray, convention: str = "segment") -> float:
    """Major axis from the largest eigenvalue of the pixel-coordinate covariance.

    ``segment``: sqrt(12 * lambda), the length of a uniform line segment with
    that variance (a 1xL bar gives L). ``ellipse``: 4 * sqrt(lambda), the
    major axis of the moment-equivalent filled ellipse.
    """
    rr, cc = np.nonzero(mask)
    cov = np.cov(np.vstack([rr, cc]).astype(np.float64), bias=True)
    lam = float(np.linalg.eigvalsh(cov)[-1])
    lam = max(lam, 0.0)
    if convention == "segment":
        return math.sqrt(12.0 * lam)
    if convention == "ellipse":
        return 4.0 * math.sqrt(lam)
    raise ValueError(f"unknown axis convention {convention!r}")


def fiber_metrics(mask: np.ndarray, convention: str = "segment") -> MorphologyReport:
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < MIN_SKELETON_AREA:
        raise MorphologyError("too small to skeletonize")
    skel = skeletonize(mask)
    fiber = max(geodesic_diameter(skel), 1.0)
    major = major_axis_length(mask, convention)
    # Single-pixel-wide or point-like masks: fall back to a unit axis.
    major = max(major, 1.0)
    return MorphologyReport(fiber, major, fiber / major, int(skel.sum()))
