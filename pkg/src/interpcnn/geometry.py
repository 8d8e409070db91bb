"""Point-set container, uniform-grid neighbor index, and sampling utilities.

The index hashes points into cubic cells of a fixed size and answers
fixed-radius queries by scanning the 27 cells around a query point. It
is built once per operator invocation with the cell size equal to the
query radius, which keeps every query exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .tensor import Tensor

_SHIFTS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass
class PointSet:
    """Coordinates plus optional per-point feature rows for one cloud."""

    coords: np.ndarray
    features: Tensor | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise InputError(f"coords must be (N, 3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise InputError("coords contain non-finite values")
        if self.features is not None and self.features.shape[0] != len(self.coords):
            raise InputError(
                f"feature rows ({self.features.shape[0]}) do not match "
                f"point count ({len(self.coords)})"
            )

    def __len__(self) -> int:
        return len(self.coords)


class SpatialIndex:
    """Uniform-grid hash over a fixed point cloud.

    Points are bucketed by ``floor(coord / cell_size)`` per axis and kept
    in key-sorted order so batched queries run as vectorized range
    lookups. Valid query radii never exceed the cell size.
    """

    def __init__(self, coords: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise InputError(f"cell_size must be positive, got {cell_size}")
        coords = np.asarray(coords, dtype=np.float64)
        if len(coords) < 1:
            raise InputError("index needs at least one point")
        if not np.isfinite(coords).all():
            raise InputError("coords contain non-finite values")
        self.cell_size = float(cell_size)
        self.n_points = len(coords)
        self._coords = coords
        cells = np.floor(coords / self.cell_size).astype(np.int64)
        self._mins = cells.min(axis=0)
        shifted = cells - self._mins
        self._dims = shifted.max(axis=0) + 1
        keys = self._ravel(shifted)
        order = np.argsort(keys, kind="stable")  # stable: ascending index inside a cell
        self._order = order
        self._sorted_keys = keys[order]

    def _ravel(self, cells: np.ndarray) -> np.ndarray:
        dy, dz = int(self._dims[1]), int(self._dims[2])
        return (cells[:, 0] * dy + cells[:, 1]) * dz + cells[:, 2]

    @property
    def buckets(self) -> dict[tuple[int, int, int], np.ndarray]:
        """Cell key -> point indices, reconstructed from the sorted layout."""
        out: dict[tuple[int, int, int], np.ndarray] = {}
        cells = np.floor(self._coords / self.cell_size).astype(np.int64)
        for key in np.unique(self._ravel(cells - self._mins)):
            members = self._order[np.searchsorted(self._sorted_keys, key, "left"):
                                  np.searchsorted(self._sorted_keys, key, "right")]
            cell = cells[members[0]]
            out[tuple(int(v) for v in cell)] = np.sort(members)
        return out

    def _candidates(self, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All (center row, point index) pairs from the 27 cells per center."""
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        base = np.floor(centers / self.cell_size).astype(np.int64) - self._mins
        cells = base[:, None, :] + _SHIFTS[None, :, :]  # (M, 27, 3)
        valid = np.all((cells >= 0) & (cells < self._dims), axis=2)
        rows, shifts = np.nonzero(valid)
        if len(rows) == 0:
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
        keys = self._ravel(cells[rows, shifts])
        left = self._sorted_keys.searchsorted(keys, "left")
        right = self._sorted_keys.searchsorted(keys, "right")
        counts = right - left
        hit = counts > 0
        if not hit.any():
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
        rows, left, counts = rows[hit], left[hit], counts[hit]
        total = int(counts.sum())
        cum = np.cumsum(counts)
        pos = np.arange(total) - np.repeat(cum - counts, counts) + np.repeat(left, counts)
        return np.repeat(rows, counts), self._order[pos]

    def radius_query_many(
        self, centers: np.ndarray, radius: float, sort: bool = True
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched radius query.

        Returns flat arrays (center row, point index, offset = point - center)
        sorted by center row then ascending point index (callers that
        re-sort may pass sort=False). Points at exactly the query radius
        are included.
        """
        if radius <= 0:
            raise InputError(f"radius must be positive, got {radius}")
        if radius > self.cell_size * (1 + 1e-12):
            raise ContractError(
                f"query radius {radius} exceeds index cell size {self.cell_size}; "
                "rebuild the index with a larger cell"
            )
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        cid, pid = self._candidates(centers)
        offsets = self._coords[pid] - centers[cid]
        keep = np.einsum("ij,ij->i", offsets, offsets) <= radius * radius
        cid, pid, offsets = cid[keep], pid[keep], offsets[keep]
        if sort:
            order = np.lexsort((pid, cid))
            return cid[order], pid[order], offsets[order]
        return cid, pid, offsets

    def radius_query(self, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Points within ``radius`` of one center: (indices, offsets), by index."""
        _, pid, offsets = self.radius_query_many(np.asarray(center, dtype=np.float64)[None, :], radius)
        return pid, offsets


def build_index(points: PointSet | np.ndarray, cell_size: float) -> SpatialIndex:
    coords = points.coords if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    return SpatialIndex(coords, cell_size)


def radius_query(index: SpatialIndex, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
    return index.radius_query(center, radius)


def farthest_point_sample(points: PointSet | np.ndarray, m: int, seed: int) -> np.ndarray:
    """Greedy max-min subset of size m.

    The first pick is drawn uniformly by a generator seeded with ``seed``;
    every later pick maximizes the minimum distance to the chosen set,
    breaking ties by lowest index.
    """
    coords = points.coords if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    n = len(coords)
    if not 1 <= m <= n:
        raise InputError(f"sample size {m} out of range for {n} points")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = first
    diff = coords - coords[first]
    d2 = np.einsum("ij,ij->i", diff, diff)
    d2[first] = -1.0  # never reselect
    for k in range(1, m):
        nxt = int(np.argmax(d2))  # argmax takes the first (lowest) index on ties
        chosen[k] = nxt
        diff = coords - coords[nxt]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
        d2[nxt] = -1.0
    return chosen


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z).

    Used by network layers so downsampling depends on the geometry, not
    on the input row order.
    """
    coords = np.asarray(coords, dtype=np.float64)
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def normalize_cloud(points: PointSet) -> PointSet:
    """Center on the centroid and scale the farthest point to radius 1.

    Coincident clouds are centered only. Features pass through untouched.
    """
    coords = points.coords
    centered = coords - coords.mean(axis=0)
    radius = float(np.sqrt(np.einsum("ij,ij->i", centered, centered).max()))
    if radius > 0:
        centered = centered / radius
    return PointSet(centered, points.features)
