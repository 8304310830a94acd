"""Pseudo low-beam generation.

Points are grouped into beams by running 1-D K-means on their inclination
angle, then whole beams are dropped with a uniform stride until the target
beam count remains. Kept points are copied verbatim, so the pseudo cloud is
an exact subset of the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dadt.pointcloud import PointCloud, spherical
from dadt.rng import generator

DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-6
DEFAULT_RESTARTS = 2


@dataclass(frozen=True, eq=False)
class BeamModel:
    centers: np.ndarray
    assignment: np.ndarray
    inertia: float
    k: int
    iterations: int = 0

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


@dataclass(frozen=True, eq=False)
class PseudoCloud:
    cloud: PointCloud
    kept_beams: list[int]
    model: BeamModel | None = None


def _init_centers(sorted_phi: np.ndarray, k: int) -> np.ndarray:
    n = len(sorted_phi)
    idx = ((np.arange(k) + 0.5) * n / k).astype(np.int64)
    centers = sorted_phi[np.minimum(idx, n - 1)]
    if np.all(np.diff(centers) > 0):
        return centers.copy()
    # heavy ties: fall back to quantiles of the distinct values
    distinct = np.unique(sorted_phi)
    idx = ((np.arange(k) + 0.5) * len(distinct) / k).astype(np.int64)
    return distinct[idx].copy()


def _assign(sorted_phi: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # nearest center in 1-D; a point on a midpoint goes to the lower center
    mids = 0.5 * (centers[1:] + centers[:-1])
    return np.searchsorted(mids, sorted_phi, side="left")


def _hartigan(s: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Single-point transfers across cluster boundaries while they cut the SSE.

    In 1-D, clusters of a sorted array stay contiguous, so only the points at
    each boundary can profitably move. Returns the refined centers.
    """
    k = len(centers)
    lab = _assign(s, centers)
    b = np.searchsorted(lab, np.arange(k + 1), side="left")
    b[-1] = len(s)
    c1 = np.concatenate([[0.0], np.cumsum(s)])
    for _ in range(10 * len(s)):
        moved = False
        for i in range(1, k):
            na, nb = b[i] - b[i - 1], b[i + 1] - b[i]
            if na == 0 or nb == 0:
                continue
            ma = (c1[b[i]] - c1[b[i - 1]]) / na
            mb = (c1[b[i + 1]] - c1[b[i]]) / nb
            x = s[b[i] - 1]
            if na > 1:
                delta = nb / (nb + 1) * (x - mb) ** 2 - na / (na - 1) * (x - ma) ** 2
                if delta < -1e-15 * (1 + x * x) and s[b[i] - 2] < x:
                    b[i] -= 1
                    moved = True
                    continue
            x = s[b[i]]
            if nb > 1:
                delta = na / (na + 1) * (x - ma) ** 2 - nb / (nb - 1) * (x - mb) ** 2
                if delta < -1e-15 * (1 + x * x) and s[b[i] + 1] > x:
                    b[i] += 1
                    moved = True
        if not moved:
            break
    counts = np.diff(b)
    sums = c1[b[1:]] - c1[b[:-1]]
    return np.where(counts > 0, sums / np.maximum(counts, 1), centers)


def _lloyd(s: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    k = len(centers)
    it = 0
    for it in range(1, max_iter + 1):
        lab = _assign(s, centers)
        sums = np.bincount(lab, weights=s, minlength=k)
        counts = np.bincount(lab, minlength=k)
        # an empty cluster keeps its previous center
        new = np.sort(np.where(counts > 0, sums / np.maximum(counts, 1), centers))
        moved = float(np.max(np.abs(new - centers)))
        centers = new
        if moved < tol:
            break
    if k > 1:
        refined = _hartigan(s, centers)
        if np.all(np.diff(refined) >= 0):
            lab = _assign(s, refined)
            if np.sum((s - refined[lab]) ** 2) < np.sum((s - centers[_assign(s, centers)]) ** 2):
                centers = refined
    lab = _assign(s, centers)
    return centers, lab, float(np.sum((s - centers[lab]) ** 2)), it


def _best_split(seg: np.ndarray) -> tuple[float, float, float]:
    """Best 2-means split of a sorted segment: (sse gain, left mean, right mean)."""
    n = len(seg)
    if n < 2 or seg[0] == seg[-1]:
        return 0.0, 0.0, 0.0
    c1 = np.cumsum(seg)
    c2 = np.cumsum(seg * seg)
    m = np.arange(1, n)
    left = c2[:-1] - c1[:-1] ** 2 / m
    right = (c2[-1] - c2[:-1]) - (c1[-1] - c1[:-1]) ** 2 / (n - m)
    whole = c2[-1] - c1[-1] ** 2 / n
    # only cut between distinct values so both halves get distinct means
    total = np.where(seg[1:] > seg[:-1], left + right, np.inf)
    i = int(np.argmin(total))
    return float(whole - total[i]), float(seg[:i + 1].mean()), float(seg[i + 1:].mean())


def _relocate(s: np.ndarray, centers: np.ndarray, inertia: float,
              max_iter: int, tol: float, max_rounds: int = 50, top: int = 4, gate: float = 2.0):
    """Move one center at a time into another cluster, splitting it optimally.

    Moves are ranked by the SSE of their starting configuration (an upper
    bound on where Lloyd's iterations end). Of the moves starting below
    ``gate`` times the current inertia, the ``top`` best per removed center are
    refined; a move is kept only if it strictly lowers the inertia.
    """
    k = len(centers)
    # ignore gains at rounding level of the total variation
    floor = 1e-12 * float(np.sum((s - s.mean()) ** 2))
    for _ in range(max_rounds):
        improved = False
        for j in range(k):
            rest = np.delete(centers, j)
            lab = _assign(s, rest)
            counts = np.bincount(lab, minlength=k - 1)
            sums = np.bincount(lab, weights=s, minlength=k - 1)
            means = np.where(counts > 0, sums / np.maximum(counts, 1), rest)
            sse_rest = float(np.sum((s - means[lab]) ** 2))
            bounds = np.concatenate([[0], np.cumsum(counts)])
            moves = []
            for c in range(k - 1):
                gain, lo, hi = _best_split(s[bounds[c]:bounds[c + 1]])
                if gain > 0 and sse_rest - gain < gate * inertia:
                    moves.append((sse_rest - gain, c, lo, hi))
            for _, c, lo, hi in sorted(moves)[:top]:
                cand = np.sort(np.concatenate([np.delete(rest, c), [lo, hi]]))
                cand, _, cand_inertia, _ = _lloyd(s, cand, max_iter, tol)
                if cand_inertia < inertia - floor:
                    centers, inertia, improved = cand, cand_inertia, True
                    break
            if improved:
                break
        if not improved:
            break
    return centers


def _plus_plus(s: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray | None:
    centers = [s[rng.integers(len(s))]]
    d2 = (s - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            return None
        centers.append(s[rng.choice(len(s), p=d2 / total)])
        d2 = np.minimum(d2, (s - centers[-1]) ** 2)
    centers = np.unique(centers)
    return centers if len(centers) == k else None


def _polish(s: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Member means taken relative to each cluster's smallest value.

    The shift makes a cluster of identical values land exactly on that value;
    the polished centers are kept only if the assignment does not change.
    """
    lab = _assign(s, centers)
    b = np.searchsorted(lab, np.arange(len(centers) + 1), side="left")
    out = centers.copy()
    for j in range(len(centers)):
        seg = s[b[j]:b[j + 1]]
        if len(seg):
            out[j] = seg[0] + np.mean(seg - seg[0])
    if np.all(np.diff(out) > 0) and np.array_equal(_assign(s, out), lab):
        return out
    return centers


def _local_search(s, centers, max_iter, tol):
    centers, _, inertia, it = _lloyd(s, centers, max_iter, tol)
    if len(centers) > 1:
        centers = _relocate(s, centers, inertia, max_iter, tol)
    lab = _assign(s, centers)
    return centers, float(np.sum((s - centers[lab]) ** 2)), it


def kmeans_1d(values, k: int, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
              n_restarts: int = DEFAULT_RESTARTS, seed: int = 0):
    """K-means on 1-D data.

    Lloyd's algorithm from quantile initialization, refined by boundary
    single-point transfers and a center-relocation search that escapes
    Lloyd's local optima. ``n_restarts`` extra runs from seeded k-means++
    starts are tried and the lowest inertia wins. Returns ``(centers, labels,
    inertia, iterations)`` with ascending centers and labels aligned to
    ``values``.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) == 0:
        raise ValueError("cannot cluster an empty set")
    if not 1 <= k <= len(np.unique(values)):
        raise ValueError(f"k={k} must be between 1 and the number of distinct values")
    order = np.argsort(values, kind="stable")
    s = values[order]
    centers, inertia, it = _local_search(s, _init_centers(s, k), max_iter, tol)
    rng = generator(seed)
    for _ in range(n_restarts if k > 1 else 0):
        start = _plus_plus(s, k, rng)
        if start is None:
            continue
        cand, cand_inertia, cand_it = _local_search(s, start, max_iter, tol)
        if cand_inertia < inertia:
            centers, inertia, it = cand, cand_inertia, cand_it
    centers = _polish(s, centers)
    lab_sorted = _assign(s, centers)
    inertia = float(np.sum((s - centers[lab_sorted]) ** 2))
    labels = np.empty_like(lab_sorted)
    labels[order] = lab_sorted
    return centers, labels, inertia, it


def cluster_beams(cloud: PointCloud, k: int, seed: int = 0,
                  max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
                  n_restarts: int = DEFAULT_RESTARTS) -> BeamModel:
    """Assign every point of ``cloud`` to one of ``k`` inclination clusters.

    The first run starts from phi quantiles; ``seed`` drives only the extra
    k-means++ restarts, so the result is a pure function of its arguments.
    """
    if len(cloud) == 0:
        raise ValueError("cannot cluster beams of an empty cloud")
    _, phi, _ = spherical(cloud.xyz)
    centers, labels, inertia, it = kmeans_1d(phi, k, max_iter, tol, n_restarts, seed)
    return BeamModel(centers, labels, inertia, k, it)


def select_beams(model: BeamModel, target: int) -> list[int]:
    """Indices ``floor(j * k / target)`` for ``j < target``."""
    if not 1 <= target <= model.k:
        raise ValueError(f"target beam count {target} outside [1, {model.k}]")
    return [(j * model.k) // target for j in range(target)]


def downsample(cloud: PointCloud, model: BeamModel, target: int) -> PseudoCloud:
    if len(model.assignment) != len(cloud):
        raise ValueError("beam model does not cover this cloud")
    kept = select_beams(model, target)
    mask = np.zeros(model.k, dtype=bool)
    mask[kept] = True
    keep = mask[model.assignment]
    out = cloud.with_labels(model.assignment).subset(keep)
    return PseudoCloud(out, kept, model)


def generate_pseudo_low_beam(cloud: PointCloud, source_beams: int, target_beams: int,
                             seed: int = 0, max_iter: int = DEFAULT_MAX_ITER,
                             tol: float = DEFAULT_TOL) -> PseudoCloud:
    """Emulate a ``target_beams`` sensor from a ``source_beams`` cloud."""
    if not source_beams >= target_beams >= 1:
        raise ValueError(
            f"need source_beams >= target_beams >= 1, got {source_beams}, {target_beams}")
    model = cluster_beams(cloud, source_beams, seed, max_iter, tol)
    return downsample(cloud, model, target_beams)
