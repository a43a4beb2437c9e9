"""Two-stage radial masking of sparse voxel grids.

Stage 1 picks angular groups to sense (each group kept with probability
1 - m, or exactly round((1-m)*N_g) groups in exact_count mode); voxels in
unselected groups are fully masked.  Stage 2 drops voxels inside sensed
groups with a range-dependent probability looked up by distance subgroup.

Every random decision is a keyed draw (seed, group, voxel coordinate), so
outcomes are independent of iteration order and safe to parallelize.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from . import keyrand
from .errors import InvalidPairing
from .pointcloud import CylindricalCoord
from .voxelizer import VoxelGrid, grid_cylindrical

# Salts separating the keyed RNG streams.
_GROUP_STREAM = 0x47524F55
_VOXEL_STREAM = 0x564F5845

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class MaskConfig:
    n_groups: int = 360  # 1-degree angular groups
    m: float = 0.8  # masking ratio; group selection probability is 1 - m
    selection_mode: str = "bernoulli"  # or "exact_count"
    r_thresholds: tuple[float, ...] = (30.0, 50.0)
    p_drop: tuple[tuple[float, ...], ...] = ((0.0, 0.5, 0.9),)
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("m must lie in [0, 1]")
        if self.selection_mode not in ("bernoulli", "exact_count"):
            raise ValueError(
                f"selection_mode must be bernoulli or exact_count,"
                f" got {self.selection_mode!r}"
            )
        t = self.r_thresholds
        if any(a <= 0 for a in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("r_thresholds must be positive and ascending")
        rows = self.p_drop
        if len(rows) not in (1, self.n_groups):
            raise ValueError(
                "p_drop must have 1 shared row or one row per group"
            )
        for row in rows:
            if len(row) != self.n_subgroups:
                raise ValueError(
                    f"each p_drop row needs {self.n_subgroups} entries"
                )
            if any(not 0.0 <= p <= 1.0 for p in row):
                raise ValueError("drop probabilities must lie in [0, 1]")

    @property
    def n_subgroups(self) -> int:
        return len(self.r_thresholds) + 1

    def drop_row(self, group: int) -> tuple[float, ...]:
        return self.p_drop[0] if len(self.p_drop) == 1 else self.p_drop[group]


@dataclass(frozen=True)
class MaskStats:
    group_visible_fraction: float
    voxel_visible_fraction: float
    per_subgroup_drop_rate: tuple[float, ...]  # NaN where no voxels sampled
    max_sensed_range: float

    def to_json_dict(self) -> dict:
        return {
            "group_visible_fraction": self.group_visible_fraction,
            "voxel_visible_fraction": self.voxel_visible_fraction,
            "per_subgroup_drop_rate": [
                None if math.isnan(v) else v
                for v in self.per_subgroup_drop_rate
            ],
            "max_sensed_range": self.max_sensed_range,
        }


@dataclass
class MaskOutcome:
    """Per-voxel decisions for one grid: visible[i] matches grid.coords[i]."""

    selected_groups: frozenset[int]
    visible: np.ndarray  # (N,) bool, canonical grid order
    groups: np.ndarray  # (N,) int64, angular group per voxel
    subgroups: np.ndarray  # (N,) int64, distance subgroup per voxel
    stats: MaskStats

    @property
    def visible_rows(self) -> np.ndarray:
        return np.flatnonzero(self.visible)


def assign_angular_group(c: CylindricalCoord, n_groups: int) -> int:
    """Index of the 2*pi/n_groups wedge containing azimuth theta."""
    g = int(c.theta / (TWO_PI / n_groups))
    return min(g, n_groups - 1)


def assign_distance_subgroup(
    c: CylindricalCoord, r_thresholds: tuple[float, ...]
) -> int:
    """Radial band index; a radius equal to a threshold lands in the
    farther band."""
    return bisect_right(list(r_thresholds), c.r)


def _groups_of(theta: np.ndarray, n_groups: int) -> np.ndarray:
    g = (theta / (TWO_PI / n_groups)).astype(np.int64)
    return np.minimum(g, n_groups - 1)


def _subgroups_of(r: np.ndarray, thresholds) -> np.ndarray:
    return np.searchsorted(np.asarray(thresholds), r, side="right").astype(
        np.int64
    )


def select_groups(cfg: MaskConfig, seed: int | None = None) -> frozenset[int]:
    """Stage 1: the sensed angular groups, deterministic in the seed."""
    seed = cfg.seed if seed is None else seed
    p_keep = 1.0 - cfg.m
    if cfg.selection_mode == "bernoulli":
        u = keyrand.uniform_array(
            seed,
            np.full(cfg.n_groups, _GROUP_STREAM, dtype=np.int64),
            np.arange(cfg.n_groups, dtype=np.int64),
        )
        return frozenset(np.flatnonzero(u < p_keep).tolist())
    count = int(round(p_keep * cfg.n_groups))
    rng = np.random.default_rng(keyrand.derive_seed(seed, _GROUP_STREAM))
    return frozenset(
        rng.choice(cfg.n_groups, size=count, replace=False).tolist()
    )


def apply_mask(
    grid: VoxelGrid, cfg: MaskConfig, seed: int | None = None
) -> MaskOutcome:
    """Mask a voxel grid: unselected groups go dark entirely; voxels in
    sensed groups survive an independent keyed Bernoulli drop with
    probability p_drop[group, subgroup]."""
    seed = cfg.seed if seed is None else seed
    selected = select_groups(cfg, seed)
    n = len(grid)
    if n == 0:
        empty = np.empty(0, dtype=np.int64)
        stats = MaskStats(
            len(selected) / cfg.n_groups,
            0.0,
            tuple([float("nan")] * cfg.n_subgroups),
            0.0,
        )
        return MaskOutcome(
            selected, np.empty(0, dtype=bool), empty, empty, stats
        )

    r, theta = grid_cylindrical(grid)
    groups = _groups_of(theta, cfg.n_groups)
    subgroups = _subgroups_of(r, cfg.r_thresholds)

    in_selected = (
        np.isin(groups, np.fromiter(selected, dtype=np.int64))
        if selected
        else np.zeros(n, dtype=bool)
    )
    u = keyrand.uniform_array(
        seed,
        np.full(n, _VOXEL_STREAM, dtype=np.int64),
        groups,
        grid.coords[:, 0],
        grid.coords[:, 1],
        grid.coords[:, 2],
    )
    p = _drop_probs(cfg, groups, subgroups)
    visible = in_selected & (u >= p)

    stats = _compute_stats(cfg, selected, visible, in_selected, subgroups, r)
    return MaskOutcome(selected, visible, groups, subgroups, stats)


def _drop_probs(
    cfg: MaskConfig, groups: np.ndarray, subgroups: np.ndarray
) -> np.ndarray:
    table = np.asarray(cfg.p_drop, dtype=np.float64)
    rows = np.zeros_like(groups) if table.shape[0] == 1 else groups
    return table[rows, subgroups]


def _compute_stats(cfg, selected, visible, in_selected, subgroups, r):
    n = len(visible)
    rates = []
    for k in range(cfg.n_subgroups):
        sel_k = in_selected & (subgroups == k)
        total = int(sel_k.sum())
        if total == 0:
            rates.append(float("nan"))
        else:
            rates.append(float((sel_k & ~visible).sum()) / total)
    vis_r = r[visible]
    return MaskStats(
        group_visible_fraction=len(selected) / cfg.n_groups,
        voxel_visible_fraction=float(visible.sum()) / n if n else 0.0,
        per_subgroup_drop_rate=tuple(rates),
        max_sensed_range=float(vis_r.max()) if vis_r.size else 0.0,
    )


def mask_statistics(
    outcome: MaskOutcome, grid: VoxelGrid, cfg: MaskConfig
) -> MaskStats:
    """Recompute MaskStats for an outcome/grid pair (InvalidPairing if the
    outcome was not produced from this grid)."""
    if len(outcome.visible) != len(grid):
        raise InvalidPairing(
            f"outcome covers {len(outcome.visible)} voxels, grid has"
            f" {len(grid)}"
        )
    r, theta = grid_cylindrical(grid)
    groups = _groups_of(theta, cfg.n_groups)
    subgroups = _subgroups_of(r, cfg.r_thresholds)
    if not (
        np.array_equal(groups, outcome.groups)
        and np.array_equal(subgroups, outcome.subgroups)
    ):
        raise InvalidPairing("outcome group assignment disagrees with grid")
    in_selected = (
        np.isin(groups, np.fromiter(outcome.selected_groups, dtype=np.int64))
        if outcome.selected_groups
        else np.zeros(len(grid), dtype=bool)
    )
    return _compute_stats(
        cfg, outcome.selected_groups, outcome.visible, in_selected,
        subgroups, r,
    )


def write_mask_dump(outcome: MaskOutcome, grid: VoxelGrid, path) -> None:
    """Text export: "ix iy iz M" per voxel, M=1 visible, canonical order."""
    with open(path, "w", newline="\n") as fh:
        for (ix, iy, iz), vis in zip(grid.coords, outcome.visible):
            fh.write(f"{ix} {iy} {iz} {1 if vis else 0}\n")


def write_stats_json(stats: MaskStats, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(stats.to_json_dict(), fh, indent=2)
        fh.write("\n")
