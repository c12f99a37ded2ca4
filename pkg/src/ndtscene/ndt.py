"""Multi-scale Normal Distributions Transform grids.

A grid buckets points into cubic cells ``floor((x - origin) / cell_size)`` and
keeps, per occupied cell, the point count, mean and unbiased sample
covariance. Cells are stored struct-of-arrays in canonical order
(lexicographic on the integer cell index).
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .io import CameraView, PointCloud

DESCRIPTOR_DIM = 15
DEFAULT_DEPTH_TOLERANCE = 0.02


@dataclass(frozen=True)
class CellStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int
    rgb: np.ndarray
    rgb_valid: bool = False


@dataclass(frozen=True, eq=False)
class NdtGrid:
    cell_size: float
    origin: np.ndarray
    indices: np.ndarray          # (N, 3) int64, canonical order
    counts: np.ndarray           # (N,) int64
    means: np.ndarray            # (N, 3)
    covariances: np.ndarray      # (N, 3, 3), unregularized
    rgb: np.ndarray              # (N, C)
    rgb_valid: np.ndarray        # (N,) bool
    point_assignment: np.ndarray  # (N_p,) row into the canonical order
    regularization: float = 0.0

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def point_count(self) -> int:
        return len(self.point_assignment)

    def cell(self, row: int) -> CellStats:
        return CellStats(self.means[row], self.covariances[row], int(self.counts[row]),
                         self.rgb[row], bool(self.rgb_valid[row]))

    @property
    def cells(self) -> dict[tuple[int, int, int], CellStats]:
        return {tuple(int(v) for v in idx): self.cell(j) for j, idx in enumerate(self.indices)}

    def row_of(self, index: Sequence[int]) -> int:
        """Canonical row of an integer cell index (``KeyError`` if unoccupied)."""
        key = np.asarray(index, dtype=np.int64)
        pos = _lex_search(self.indices, key[None, :])[0]
        if pos >= len(self) or not np.array_equal(self.indices[pos], key):
            raise KeyError(tuple(index))
        return int(pos)

    def point_cell_indices(self) -> np.ndarray:
        return self.indices[self.point_assignment]

    def regularized_covariances(self) -> np.ndarray:
        if self.regularization == 0.0:
            return self.covariances
        return self.covariances + self.regularization * np.eye(3)

    def centroid(self) -> np.ndarray:
        """Point-weighted centroid of the cloud (independent of scale)."""
        return (self.means * self.counts[:, None]).sum(axis=0) / self.counts.sum()

    def descriptors(self, center: np.ndarray | None = None) -> np.ndarray:
        """Per-cell ``[mean; covariance row-major; rgb]`` rows.

        ``center`` is subtracted from the mean block when given.
        """
        means = self.means if center is None else self.means - center
        return np.concatenate([means, self.regularized_covariances().reshape(-1, 9), self.rgb],
                              axis=1)

    def to_json(self) -> str:
        return json.dumps([
            {"index": idx.tolist(), "n": int(n), "mean": mu.tolist(),
             "covariance": cov.tolist(), "rgb": rgb.tolist(), "rgb_valid": bool(valid)}
            for idx, n, mu, cov, rgb, valid in zip(self.indices, self.counts, self.means,
                                                   self.covariances, self.rgb, self.rgb_valid)
        ])


@dataclass(frozen=True, eq=False)
class MultiScaleNdt:
    grids: tuple[NdtGrid, ...]
    scale_config: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.grids)

    def __getitem__(self, r: int) -> NdtGrid:
        return self.grids[r]

    @property
    def finest(self) -> NdtGrid:
        return self.grids[-1]

    @property
    def coarsest(self) -> NdtGrid:
        return self.grids[0]


def _lex_search(sorted_rows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """searchsorted for lexicographically sorted int64 rows."""
    view = np.dtype([("a", np.int64), ("b", np.int64), ("c", np.int64)])
    hay = np.ascontiguousarray(sorted_rows, dtype=np.int64).view(view).reshape(-1)
    needles = np.ascontiguousarray(queries, dtype=np.int64).view(view).reshape(-1)
    return np.searchsorted(hay, needles)


def canonicalize(grid: NdtGrid) -> NdtGrid:
    """Reorder a grid's cell rows lexicographically (no-op when already sorted)."""
    idx = grid.indices
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    if np.array_equal(order, np.arange(len(order))):
        return grid
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return replace(grid, indices=idx[order], counts=grid.counts[order], means=grid.means[order],
                   covariances=grid.covariances[order], rgb=grid.rgb[order],
                   rgb_valid=grid.rgb_valid[order], point_assignment=rank[grid.point_assignment])


def cell_indices(points: np.ndarray, cell_size: float, origin: np.ndarray) -> np.ndarray:
    return np.floor((points - origin) / cell_size).astype(np.int64)


def _canonical_buckets(idx: np.ndarray):
    """Stable grouping of points by cell index in lexicographic cell order.

    Returns ``(order, starts, cell_rows)`` where ``order`` sorts points by cell
    while keeping ascending point index inside a cell.
    """
    lo = idx.min(axis=0)
    span = idx.max(axis=0) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2.0 ** 62:
        shifted = idx - lo
        key = (shifted[:, 0] * span[1] + shifted[:, 1]) * span[2] + shifted[:, 2]
        order = np.argsort(key, kind="stable")
        skey = key[order]
        boundary = np.empty(len(skey), dtype=bool)
        boundary[0] = True
        np.not_equal(skey[1:], skey[:-1], out=boundary[1:])
    else:
        order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
        sidx = idx[order]
        boundary = np.empty(len(sidx), dtype=bool)
        boundary[0] = True
        np.any(sidx[1:] != sidx[:-1], axis=1, out=boundary[1:])
    starts = np.flatnonzero(boundary)
    cell_rows = idx[order[starts]]
    return order, starts, cell_rows


def _segment_stats(sorted_pts: np.ndarray, starts: np.ndarray, total: int):
    """Counts, means and covariances for contiguous point segments.

    Two-pass (mean, then centered second moments); every sum runs in
    ascending position inside its segment.
    """
    ends = np.append(starts[1:], total)
    counts = ends - starts
    sums = np.add.reduceat(sorted_pts, starts, axis=0)
    means = sums / counts[:, None]
    centered = sorted_pts - np.repeat(means, counts, axis=0)
    x, y, z = centered[:, 0], centered[:, 1], centered[:, 2]
    prods = np.stack([x * x, x * y, x * z, y * y, y * z, z * z], axis=1)
    m2 = np.add.reduceat(prods, starts, axis=0)
    denom = np.where(counts > 1, counts - 1, 1).astype(np.float64)
    c = m2 / denom[:, None]
    c[counts == 1] = 0.0
    cov = np.empty((len(counts), 3, 3))
    cov[:, 0, 0], cov[:, 0, 1], cov[:, 0, 2] = c[:, 0], c[:, 1], c[:, 2]
    cov[:, 1, 0], cov[:, 1, 1], cov[:, 1, 2] = c[:, 1], c[:, 3], c[:, 4]
    cov[:, 2, 0], cov[:, 2, 1], cov[:, 2, 2] = c[:, 2], c[:, 4], c[:, 5]
    return counts, means, cov


def _partitions(n_cells: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, n_cells))
    bounds = np.linspace(0, n_cells, workers + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def build_ndt_grid(cloud: PointCloud, cell_size: float, origin=None,
                   regularization: float = 0.0, threads: int = 1) -> NdtGrid:
    """Bucket ``cloud`` into cells of edge ``cell_size`` and summarize each cell.

    ``origin`` defaults to the componentwise minimum of the cloud. Cells with a
    single point get a zero covariance. Work is split over disjoint cell ranges
    when ``threads > 1``; the result is bit-identical for any thread count.
    """
    if not cell_size > 0 or not np.isfinite(cell_size):
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    if regularization < 0:
        raise ValueError("regularization must be nonnegative")
    pts = np.asarray(cloud.positions, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    origin = pts.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    idx = cell_indices(pts, cell_size, origin)
    order, starts, cell_rows = _canonical_buckets(idx)
    sorted_pts = pts[order]
    n_cells = len(starts)
    point_ends = np.append(starts[1:], len(pts))

    def work(part):
        a, b = part
        lo, hi = starts[a], point_ends[b - 1]
        return _segment_stats(sorted_pts[lo:hi], starts[a:b] - lo, hi - lo)

    parts = _partitions(n_cells, threads)
    if len(parts) == 1:
        results = [work(parts[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            results = list(pool.map(work, parts))
    counts = np.concatenate([r[0] for r in results])
    means = np.concatenate([r[1] for r in results])
    covs = np.concatenate([r[2] for r in results])

    assignment = np.empty(len(pts), dtype=np.int64)
    assignment[order] = np.repeat(np.arange(n_cells), counts)
    return NdtGrid(
        cell_size=float(cell_size), origin=origin, indices=cell_rows, counts=counts,
        means=means, covariances=covs, rgb=np.zeros((n_cells, 3)),
        rgb_valid=np.zeros(n_cells, dtype=bool), point_assignment=assignment,
        regularization=float(regularization),
    )


def build_multiscale(cloud: PointCloud, scale_config: Sequence[float],
                     regularization: float = 0.0, threads: int = 1) -> MultiScaleNdt:
    """Grid ``cloud`` at every size in ``scale_config`` (coarse to fine).

    All scales share the bounding-box-minimum origin and are built from the
    raw points.
    """
    sizes = tuple(float(s) for s in scale_config)
    if not sizes:
        raise ValueError("scale_config is empty")
    if any(s <= 0 for s in sizes):
        raise ValueError("cell sizes must be positive")
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"cell sizes must be strictly decreasing, got {list(sizes)}")
    origin = cloud.positions.min(axis=0)
    grids = tuple(build_ndt_grid(cloud, s, origin, regularization, threads) for s in sizes)
    return MultiScaleNdt(grids, sizes)


def merge_cell_stats(children: Iterable[CellStats]) -> CellStats:
    """Combine cell summaries as if built from the union of their points.

    Uses the pairwise mean/scatter update; rgb is the count-weighted mean of
    the children with valid color.
    """
    children = list(children)
    if not children:
        raise ValueError("merge_cell_stats needs at least one child")
    first = children[0]
    n = first.n
    mean = np.array(first.mean, dtype=np.float64)
    scatter = np.asarray(first.covariance, dtype=np.float64) * max(n - 1, 0)
    rgb_sum = np.asarray(first.rgb, dtype=np.float64) * n * first.rgb_valid
    rgb_n = n if first.rgb_valid else 0
    for child in children[1:]:
        if child.n < 1:
            raise ValueError("child cells must hold at least one point")
        m = child.n
        total = n + m
        delta = np.asarray(child.mean) - mean
        scatter = (scatter + np.asarray(child.covariance) * max(m - 1, 0)
                   + np.outer(delta, delta) * (n * m / total))
        mean = mean + delta * (m / total)
        n = total
        if child.rgb_valid:
            rgb_sum = rgb_sum + np.asarray(child.rgb) * m
            rgb_n += m
    cov = scatter / (n - 1) if n > 1 else np.zeros((3, 3))
    cov = 0.5 * (cov + cov.T)
    rgb = rgb_sum / rgb_n if rgb_n else np.zeros_like(rgb_sum)
    return CellStats(mean, cov, n, rgb, rgb_n > 0)


# ------------------------------------------------------------ multi-view lifting

def project_to_cells(grid: NdtGrid, views: Sequence[CameraView],
                     depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
                     use_depth: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Average view rasters sampled at each cell mean.

    A view counts for a cell when the mean has positive camera depth, lands on
    an in-bounds nearest pixel (pixel ``i`` spans ``[i - 0.5, i + 0.5)``), and,
    if the view carries a depth map and ``use_depth`` is set, is not behind the
    stored depth by more than ``depth_tolerance``. Returns ``(values, valid)``;
    cells with no valid view get zeros.
    """
    if not views:
        raise ValueError("at least one view is required")
    channels = views[0].channels
    if any(v.channels != channels for v in views):
        raise ValueError("all views must have the same channel count")
    total = np.zeros((len(grid), channels))
    hits = np.zeros(len(grid), dtype=np.int64)
    for view in views:
        cam = grid.means @ view.rotation.T + view.translation
        z = cam[:, 2]
        front = z > 0
        safe_z = np.where(front, z, 1.0)
        u = view.fx * cam[:, 0] / safe_z + view.cx
        v = view.fy * cam[:, 1] / safe_z + view.cy
        col = np.floor(u + 0.5)
        row = np.floor(v + 0.5)
        ok = front & (col >= 0) & (col < view.width) & (row >= 0) & (row < view.height)
        col_i = np.where(ok, col, 0).astype(np.int64)
        row_i = np.where(ok, row, 0).astype(np.int64)
        if use_depth and view.depth is not None:
            ok &= z <= view.depth[row_i, col_i] + depth_tolerance
        total[ok] += view.image[row_i[ok], col_i[ok]]
        hits[ok] += 1
    valid = hits > 0
    values = np.zeros_like(total)
    values[valid] = total[valid] / hits[valid, None]
    return values, valid


def colorize_cells(grid: NdtGrid, views: Sequence[CameraView],
                   depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
                   use_depth: bool = True) -> NdtGrid:
    if views and views[0].channels != 3:
        raise ValueError("colorize_cells expects RGB views")
    rgb, valid = project_to_cells(grid, views, depth_tolerance, use_depth)
    return replace(grid, rgb=rgb, rgb_valid=valid)


def cell_descriptor(stats: CellStats) -> np.ndarray:
    return np.concatenate([np.asarray(stats.mean, dtype=np.float64).reshape(3),
                           np.asarray(stats.covariance, dtype=np.float64).reshape(9),
                           np.asarray(stats.rgb, dtype=np.float64).reshape(3)])


# ---------------------------------------------------------------- baselines

def voxel_downsample(cloud: PointCloud, cell_size: float, origin=None) -> PointCloud:
    """One centroid per occupied cell, with the cell's mean point color."""
    grid = build_ndt_grid(cloud, cell_size, origin)
    colors = None
    if cloud.colors is not None:
        sums = np.zeros((len(grid), 3))
        np.add.at(sums, grid.point_assignment, cloud.colors)
        colors = np.clip(sums / grid.counts[:, None], 0.0, 1.0)
    return PointCloud(grid.means.copy(), colors)


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class Box:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]


@dataclass(frozen=True)
class CellSet:
    cells: tuple[tuple[int, int, int], ...]


def points_in_region(grid: NdtGrid, region: Sphere | Box | CellSet) -> np.ndarray:
    """Boolean mask over canonical cells whose mean lies in ``region``."""
    if isinstance(region, Sphere):
        if not region.radius > 0:
            raise ValueError("sphere radius must be positive")
        d = grid.means - np.asarray(region.center, dtype=np.float64)
        return np.einsum("ij,ij->i", d, d) <= region.radius ** 2
    if isinstance(region, Box):
        lo = np.asarray(region.lower, dtype=np.float64)
        hi = np.asarray(region.upper, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("box lower corner exceeds upper corner")
        return np.all((grid.means >= lo) & (grid.means <= hi), axis=1)
    if isinstance(region, CellSet):
        if not region.cells:
            raise ValueError("explicit cell set is empty")
        wanted = np.asarray(region.cells, dtype=np.int64).reshape(-1, 3)
        pos = _lex_search(grid.indices, wanted)
        mask = np.zeros(len(grid), dtype=bool)
        inside = pos < len(grid)
        hit = inside.copy()
        hit[inside] = np.all(grid.indices[pos[inside]] == wanted[inside], axis=1)
        mask[pos[hit]] = True
        return mask
    raise TypeError(f"unsupported region {type(region).__name__}")
