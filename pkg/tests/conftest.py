import numpy as np
import pytest

from rmae.voxelizer import FEATURE_WIDTH, GridGeometry, VoxelGrid


@pytest.fixture
def small_geom():
    """16x16x8 grid over +/-6.4 m, 0.8 m voxels."""
    return GridGeometry(
        min_corner=(-6.4, -6.4, -1.6),
        voxel_size=(0.8, 0.8, 0.8),
        dims=(16, 16, 8),
    )


def make_grid(geom: GridGeometry, coords, feats=None, counts=None) -> VoxelGrid:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if feats is None:
        feats = np.zeros((len(coords), FEATURE_WIDTH))
    if counts is None:
        counts = np.ones(len(coords), dtype=np.int64)
    return VoxelGrid(geom, coords, np.asarray(feats, dtype=np.float64), counts)


def random_grid(geom: GridGeometry, n: int, rng: np.random.Generator) -> VoxelGrid:
    """Grid with n distinct random voxels and random features."""
    dims = np.asarray(geom.dims)
    total = int(dims.prod())
    n = min(n, total)
    lin = rng.choice(total, size=n, replace=False)
    coords = np.column_stack(
        [
            lin // (dims[1] * dims[2]),
            (lin // dims[2]) % dims[1],
            lin % dims[2],
        ]
    ).astype(np.int64)
    feats = rng.normal(0, 1, (n, FEATURE_WIDTH))
    return make_grid(geom, coords, feats)
