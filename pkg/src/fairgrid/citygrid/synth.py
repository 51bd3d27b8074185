"""Synthetic gridded-city generator.

Stands in for a real urban corpus: each region gets a cluster of residences
plus facilities that are either "well placed" (within the walk threshold of
every residence) or pushed into a far corner of the grid cell, controlled by
a single balance knob. balance=1 builds fully served regions where every
non-residence category covers every residence; balance=0 builds regions whose
facilities are all out of walking reach and drawn from a skewed category mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .demand import DemandBands, classify_demand
from .graph import build_walking_graph
from .types import (
    DEFAULT_GRID_SIZE_M,
    DEFAULT_N_MAX,
    DEFAULT_WALK_THRESHOLD_M,
    MAX_REGION_NODES,
    MIN_REGION_NODES,
    Dataset,
    FacilityCategory,
    RegionRecord,
    default_categories,
    residence_category_id,
)

# Region geometry (metres). Residences cluster near the centroid; "far"
# facilities sit in the opposite corner, strictly beyond the walk threshold
# of any residence; "well" facilities stay strictly within it.
_CENTROID_LO, _CENTROID_HI = 250.0, 550.0
_RESIDENCE_SPREAD = 200.0
_WELL_RADIUS = 1040.0
_FAR_CENTER = 1870.0
_FAR_RADIUS = 100.0

FEATURE_DIM = 16


@dataclass
class GeneratorConfig:
    regions: int = 64
    node_range: tuple[int, int] = (12, 24)
    balance: float = 1.0
    n_max: int = DEFAULT_N_MAX
    residence_frac: float = 0.2
    grid_size_m: float = DEFAULT_GRID_SIZE_M
    walk_threshold_m: float = DEFAULT_WALK_THRESHOLD_M
    feature_dim: int = FEATURE_DIM
    population_range: tuple[int, int] = (1500, 9000)
    categories: list[FacilityCategory] = field(default_factory=default_categories)

    def validate(self) -> None:
        lo, hi = self.node_range
        cap = min(MAX_REGION_NODES, self.n_max)
        if not (MIN_REGION_NODES <= lo <= hi <= cap):
            raise ConfigError(
                f"node_range {self.node_range} must lie within [{MIN_REGION_NODES}, {cap}]"
            )
        if not (0.0 <= self.balance <= 1.0):
            raise ConfigError("balance must be in [0, 1]")
        if self.regions < 1:
            raise ConfigError("need at least one region")
        if self.balance == 1.0 and lo < len(self.categories):
            # Full service needs one residence plus one facility per category.
            raise ConfigError(
                f"balance=1 requires node_range min >= {len(self.categories)}"
            )
        if not (0.0 < self.residence_frac < 1.0):
            raise ConfigError("residence_frac must be in (0, 1)")
        if self.feature_dim < 4:
            raise ConfigError("feature_dim must be at least 4")
        if self.walk_threshold_m >= self.grid_size_m:
            raise ConfigError("walk threshold must be smaller than the grid size")


def derive_grid_features(
    feature_seed: int,
    region_id: int,
    node_categories: np.ndarray,
    positions: np.ndarray,
    n_max: int,
    k_cat: int,
    feature_dim: int = FEATURE_DIM,
    grid_size_m: float = DEFAULT_GRID_SIZE_M,
) -> np.ndarray:
    """Synthetic per-node feature rows: category embedding, jittered position,
    capacity scalar. Deterministic in (feature_seed, region_id, graph), so the
    loader can rebuild features instead of storing them."""
    n = len(node_categories)
    table = np.random.default_rng(feature_seed).normal(size=(k_cat, feature_dim - 3))
    rng = np.random.default_rng([feature_seed, region_id])
    jitter = rng.normal(scale=0.01, size=(n, 2))
    capacity = rng.lognormal(mean=0.0, sigma=0.5, size=n)
    feats = np.zeros((n_max, feature_dim), dtype=np.float64)
    feats[:n, : feature_dim - 3] = table[node_categories]
    feats[:n, feature_dim - 3 : feature_dim - 1] = positions / grid_size_m + jitter
    feats[:n, feature_dim - 1] = capacity
    return feats


def _disc(rng: np.random.Generator, center: np.ndarray, radius: float, size: int) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=size))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=size)
    return center + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def generate_synthetic_city(config: GeneratorConfig, seed: int) -> Dataset:
    """Generate a deterministic synthetic dataset under the given seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    categories = config.categories
    k_cat = len(categories)
    res_id = residence_category_id(categories)
    facility_ids = np.array([c.id for c in categories if not c.is_residence])
    # Skewed mix for poorly served facilities: low-id categories dominate.
    skew = 1.0 / (np.arange(len(facility_ids)) + 1.0) ** 2
    skew /= skew.sum()
    bands = DemandBands.defaults(categories)

    records: list[tuple[RegionRecord, object]] = []
    lo, hi = config.node_range
    for region_id in range(config.regions):
        n = int(rng.integers(lo, hi + 1))
        population = int(rng.integers(config.population_range[0], config.population_range[1] + 1))
        elderly = int(round(population * rng.uniform(0.12, 0.35)))
        price = rng.uniform(2e4, 9e4)
        fee = rng.uniform(1.0, 8.0)

        n_res = int(round(config.residence_frac * n))
        n_res = max(1, min(n_res, n - len(facility_ids), n - 1)) if n > len(facility_ids) else 1
        m = n - n_res

        centroid = rng.uniform(_CENTROID_LO, _CENTROID_HI, size=2)
        res_pos = _disc(rng, centroid, _RESIDENCE_SPREAD, n_res)
        well = rng.uniform(size=m) < config.balance
        perm = rng.permutation(facility_ids)
        skew_cats = rng.choice(facility_ids, size=m, p=skew)
        well_pos = _disc(rng, centroid, _WELL_RADIUS, m)
        far_pos = _disc(rng, np.array([_FAR_CENTER, _FAR_CENTER]), _FAR_RADIUS, m)

        fac_cats = np.empty(m, dtype=int)
        fac_pos = np.empty((m, 2), dtype=float)
        well_rank = 0
        for j in range(m):
            if well[j]:
                fac_cats[j] = perm[well_rank % len(facility_ids)]
                fac_pos[j] = well_pos[j]
                well_rank += 1
            else:
                fac_cats[j] = skew_cats[j]
                fac_pos[j] = far_pos[j]

        positions = np.clip(
            np.concatenate([res_pos, fac_pos], axis=0), 0.0, config.grid_size_m
        )
        node_cats = np.concatenate([np.full(n_res, res_id), fac_cats])
        graph = build_walking_graph(
            positions, node_cats, config.walk_threshold_m, k_cat, n_max=config.n_max
        )
        record = RegionRecord(
            region_id=region_id,
            urban_attributes=np.array([population, elderly, price, fee], dtype=np.float64),
            demand=np.zeros(k_cat, dtype=np.int64),
            grid_features=derive_grid_features(
                seed, region_id, node_cats, positions, config.n_max, k_cat,
                config.feature_dim, config.grid_size_m,
            ),
            population=population,
            elderly_population=elderly,
        )
        record.demand = classify_demand(graph, record, bands)
        records.append((record, graph))

    dataset = Dataset(
        records=records,
        categories=categories,
        grid_size_m=config.grid_size_m,
        walk_threshold_m=config.walk_threshold_m,
        feature_seed=seed,
    )
    dataset.validate()
    return dataset
