"""Sparse voxelization of point clouds and ground-truth occupancy grids.

Grids are regular Cartesian lattices; cylindrical coordinates are computed
per voxel center on demand for the masking stage.  Voxel rows are kept in
canonical lexicographic (ix, iy, iz) order so equal content always compares
equal and every downstream iteration is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotFound
from .pointcloud import CylindricalCoord, PointCloud, cylindrical_arrays, to_cylindrical, Point

FEATURE_WIDTH = 4  # mean offset-from-center (x, y, z) + mean intensity


@dataclass(frozen=True)
class GridGeometry:
    min_corner: tuple[float, float, float] = (-12.8, -12.8, -3.2)
    voxel_size: tuple[float, float, float] = (0.4, 0.4, 0.4)
    dims: tuple[int, int, int] = (64, 64, 16)

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel_size must be positive")
        if any(int(d) != d or d < 1 for d in self.dims):
            raise ValueError("dims must be positive integers")

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def centers(self, coords: np.ndarray) -> np.ndarray:
        """(N, 3) world coordinates of the given voxel indices' centers."""
        return np.asarray(self.min_corner) + (
            np.asarray(coords, dtype=np.float64) + 0.5
        ) * np.asarray(self.voxel_size)


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting (N, 3) integer coords by (ix, then iy, then iz)."""
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


@dataclass
class VoxelGrid:
    """Sparse voxel grid: canonical-ordered coords with per-voxel features.

    feats[i] = (mean dx, mean dy, mean dz, mean intensity) of the points in
    voxel coords[i], offsets measured from the voxel center in meters.
    """

    geometry: GridGeometry
    coords: np.ndarray  # (N, 3) int64, canonical order
    feats: np.ndarray  # (N, C) float64
    counts: np.ndarray  # (N,) int64, points per voxel (>= 1)
    dropped_points: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2 or self.feats.shape[0] != len(self.coords):
            raise ValueError("feats must be (N, C) matching coords")
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if len(self.counts) != len(self.coords):
            raise ValueError("counts/coords length mismatch")
        dims = np.asarray(self.geometry.dims)
        if len(self.coords) and (
            (self.coords < 0).any() or (self.coords >= dims).any()
        ):
            raise ValueError("voxel coordinate outside grid dims")
        order = canonical_order(self.coords)
        if not np.array_equal(order, np.arange(len(order))):
            self.coords = self.coords[order]
            self.feats = self.feats[order]
            self.counts = self.counts[order]

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.feats, other.feats)
            and np.array_equal(self.counts, other.counts)
        )

    def index_of(self, v) -> int:
        """Row index of voxel coordinate v; raises NotFound if absent."""
        v = np.asarray(v, dtype=np.int64)
        lo = np.searchsorted(self._linear(), self._linearize(v))
        if lo < len(self) and np.array_equal(self.coords[lo], v):
            return int(lo)
        raise NotFound(f"voxel {tuple(int(c) for c in v)} not in grid")

    def _linearize(self, v: np.ndarray) -> np.ndarray:
        _, ny, nz = self.geometry.dims
        return (v[..., 0] * ny + v[..., 1]) * nz + v[..., 2]

    def _linear(self) -> np.ndarray:
        return self._linearize(self.coords)


@dataclass
class OccupancyGrid:
    """Dense binary occupancy: 1 where the sparse grid has a voxel."""

    geometry: GridGeometry
    o: np.ndarray  # (nx, ny, nz) uint8

    @property
    def occupied_count(self) -> int:
        return int(self.o.sum())


def voxelize(cloud: PointCloud, geom: GridGeometry) -> VoxelGrid:
    """Bucket points into voxels; out-of-extent points are dropped (their
    count is kept on the grid's dropped_points field)."""
    if len(cloud) == 0:
        return VoxelGrid(
            geom,
            np.empty((0, 3), np.int64),
            np.empty((0, FEATURE_WIDTH), np.float64),
            np.empty((0,), np.int64),
        )
    pts = cloud.data.astype(np.float64)
    mins = np.asarray(geom.min_corner)
    sizes = np.asarray(geom.voxel_size)
    dims = np.asarray(geom.dims)

    idx = np.floor((pts[:, :3] - mins) / sizes).astype(np.int64)
    inside = ((idx >= 0) & (idx < dims)).all(axis=1)
    dropped = int((~inside).sum())
    idx = idx[inside]
    pts = pts[inside]
    if len(idx) == 0:
        return VoxelGrid(
            geom,
            np.empty((0, 3), np.int64),
            np.empty((0, FEATURE_WIDTH), np.float64),
            np.empty((0,), np.int64),
            dropped_points=dropped,
        )

    _, ny, nz = geom.dims
    linear = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    uniq, inverse, counts = np.unique(
        linear, return_inverse=True, return_counts=True
    )
    coords = np.column_stack(
        [uniq // (ny * nz), (uniq // nz) % ny, uniq % nz]
    ).astype(np.int64)

    offsets = pts[:, :3] - (mins + (idx + 0.5) * sizes)
    feats = np.zeros((len(uniq), FEATURE_WIDTH), dtype=np.float64)
    for c in range(3):
        feats[:, c] = np.bincount(
            inverse, weights=offsets[:, c], minlength=len(uniq)
        )
    feats[:, 3] = np.bincount(inverse, weights=pts[:, 3], minlength=len(uniq))
    feats /= counts[:, None]

    return VoxelGrid(geom, coords, feats, counts.astype(np.int64), dropped)


def voxel_cylindrical(grid: VoxelGrid, v) -> CylindricalCoord:
    """Cylindrical coordinates of voxel v's center (NotFound if absent)."""
    i = grid.index_of(v)
    cx, cy, cz = grid.geometry.centers(grid.coords[i : i + 1])[0]
    return to_cylindrical(Point(cx, cy, cz, 0.0))


def grid_cylindrical(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """(r, theta) arrays for every voxel in canonical order."""
    return cylindrical_arrays(grid.geometry.centers(grid.coords))


def occupancy_of(grid: VoxelGrid) -> OccupancyGrid:
    """Dense 0/1 target: exactly the sparse key set is marked occupied."""
    o = np.zeros(grid.geometry.dims, dtype=np.uint8)
    if len(grid):
        o[grid.coords[:, 0], grid.coords[:, 1], grid.coords[:, 2]] = 1
    return OccupancyGrid(grid.geometry, o)


def write_debug_dump(grid: VoxelGrid, path) -> None:
    """Text dump: one canonical-order line "ix iy iz f_1 ... f_C count"."""
    with open(path, "w", newline="\n") as fh:
        for (ix, iy, iz), f, n in zip(grid.coords, grid.feats, grid.counts):
            feats = " ".join(f"{v:.9g}" for v in f)
            fh.write(f"{ix} {iy} {iz} {feats} {n}\n")
