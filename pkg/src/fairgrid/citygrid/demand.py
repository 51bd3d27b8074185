"""Four-class demand standardization from facility counts per thousand residents."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DegenerateInputError
from .types import FacilityCategory, RegionRecord, WalkingGraph

# Supply classes.
NO_SUPPLY = 0
UNDER_SUPPLIED = 1
APPROPRIATE = 2
OVERSUPPLIED = 3


class DemandBands:
    """Per-category [low, high] bands of facilities per 1000 residents.

    A region's supply class for category k: 0 with no facility at all, 1 below
    the band, 2 inside it, 3 above it. Band values are config-supplied; the
    defaults are desk-scale stand-ins for municipal per-thousand standards.
    """

    def __init__(self, bands: np.ndarray):
        bands = np.asarray(bands, dtype=float)
        if bands.ndim != 2 or bands.shape[1] != 2:
            raise ConfigError(f"bands must be (k_cat, 2), got {bands.shape}")
        if (bands[:, 0] <= 0).any() or (bands[:, 0] > bands[:, 1]).any():
            raise ConfigError("each band needs 0 < low <= high")
        self.values = bands

    @property
    def k_cat(self) -> int:
        return self.values.shape[0]

    @classmethod
    def defaults(cls, categories: list[FacilityCategory]) -> "DemandBands":
        bands = np.empty((len(categories), 2))
        for c in categories:
            if c.is_residence:
                bands[c.id] = (1.0, 50.0)
            elif c.is_elderly:
                bands[c.id] = (0.25, 1.5)
            elif c.is_life_service:
                bands[c.id] = (0.5, 2.0)
            else:
                bands[c.id] = (0.4, 2.5)
        return cls(bands)

    def midpoints(self) -> np.ndarray:
        return self.values.mean(axis=1)


def classify_demand(
    graph: WalkingGraph, record: RegionRecord, bands: DemandBands
) -> np.ndarray:
    """Supply class per category for one region.

    Monotone in the facility count: adding a facility of category k never
    decreases class k.
    """
    if record.population <= 0:
        raise DegenerateInputError(
            f"region {record.region_id}: population must be positive to classify demand"
        )
    if bands.k_cat != graph.k_cat:
        raise ConfigError("band table does not match category count")
    counts = np.bincount(graph.node_categories(), minlength=graph.k_cat)
    rate = counts * 1000.0 / record.population
    demand = np.empty(graph.k_cat, dtype=np.int64)
    for k in range(graph.k_cat):
        low, high = bands.values[k]
        if counts[k] == 0:
            demand[k] = NO_SUPPLY
        elif rate[k] < low:
            demand[k] = UNDER_SUPPLIED
        elif rate[k] <= high:
            demand[k] = APPROPRIATE
        else:
            demand[k] = OVERSUPPLIED
    return demand
