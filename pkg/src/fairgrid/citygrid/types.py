"""Core data model: facility categories, walking graphs, regions, datasets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, GraphValidationError, ShapeError

DEFAULT_GRID_SIZE_M = 2000.0
DEFAULT_WALK_THRESHOLD_M = 1250.0
DEFAULT_N_MAX = 64

# Valid node-count range for a generated grid region.
MIN_REGION_NODES = 10
MAX_REGION_NODES = 399


@dataclass(frozen=True)
class FacilityCategory:
    """One facility type in the category table.

    Exactly one category in a table is the residence category; elderly and
    life-service flags select the subsets scored by the efficiency metrics.
    """

    id: int
    name: str
    is_residence: bool = False
    is_elderly: bool = False
    is_life_service: bool = False


def default_categories() -> list[FacilityCategory]:
    """The default 14-type category table (1 residence + 13 facility types)."""
    spec = [
        ("residence", dict(is_residence=True)),
        ("grocery", dict(is_life_service=True)),
        ("restaurant", dict(is_life_service=True)),
        ("clinic", dict(is_life_service=True)),
        ("pharmacy", dict(is_life_service=True)),
        ("bank", dict(is_life_service=True)),
        ("post_office", dict(is_life_service=True)),
        ("park", {}),
        ("school", {}),
        ("library", {}),
        ("gym", {}),
        ("community_center", {}),
        ("senior_care", dict(is_elderly=True)),
        ("senior_meal", dict(is_elderly=True)),
    ]
    return [FacilityCategory(id=i, name=name, **flags) for i, (name, flags) in enumerate(spec)]


def validate_categories(categories: list[FacilityCategory]) -> None:
    ids = [c.id for c in categories]
    if ids != list(range(len(categories))):
        raise ConfigError(f"category ids must be dense 0..{len(categories) - 1}, got {ids}")
    n_res = sum(c.is_residence for c in categories)
    if n_res != 1:
        raise ConfigError(f"exactly one residence category required, found {n_res}")


def residence_category_id(categories: list[FacilityCategory]) -> int:
    return next(c.id for c in categories if c.is_residence)


@dataclass
class WalkingGraph:
    """One region's facility graph, padded to a fixed capacity.

    ``categories_onehot`` is (n_max, k_cat), ``adjacency`` (n_max, n_max) and
    ``node_mask`` (n_max,). Rows beyond the mask are exactly zero. ``positions``
    holds metre coordinates for the unmasked nodes only (may be None for
    generated layouts that carry no geometry).
    """

    categories_onehot: np.ndarray
    adjacency: np.ndarray
    node_mask: np.ndarray
    positions: np.ndarray | None = None

    @property
    def n_max(self) -> int:
        return self.node_mask.shape[0]

    @property
    def n_nodes(self) -> int:
        return int(self.node_mask.sum())

    @property
    def k_cat(self) -> int:
        return self.categories_onehot.shape[1]

    def node_categories(self) -> np.ndarray:
        """Integer category per unmasked node, in node order."""
        idx = np.flatnonzero(self.node_mask)
        return self.categories_onehot[idx].argmax(axis=1)

    def validate(self) -> None:
        """Check all structural invariants; raises GraphValidationError."""
        n_max = self.n_max
        if self.categories_onehot.shape != (n_max, self.k_cat):
            raise ShapeError("categories_onehot shape does not match node_mask")
        if self.adjacency.shape != (n_max, n_max):
            raise ShapeError("adjacency shape does not match node_mask")
        mask = self.node_mask.astype(bool)
        if self.n_nodes < 1:
            raise GraphValidationError("graph has no unmasked nodes")
        adj = self.adjacency
        bad = np.argwhere(adj != adj.T)
        if bad.size:
            i, j = int(bad[0][0]), int(bad[0][1])
            raise GraphValidationError(
                f"adjacency is asymmetric at node pair ({i}, {j}): "
                f"A[{i}][{j}]={adj[i, j]} vs A[{j}][{i}]={adj[j, i]}"
            )
        diag = np.flatnonzero(np.diagonal(adj))
        if diag.size:
            raise GraphValidationError(f"adjacency has nonzero diagonal at node {int(diag[0])}")
        if not np.isin(adj, (0, 1)).all():
            raise GraphValidationError("adjacency entries must be 0 or 1")
        off = ~mask
        if adj[off].any() or adj[:, off].any():
            raise GraphValidationError("adjacency has nonzero entries on masked nodes")
        if self.categories_onehot[off].any():
            raise GraphValidationError("categories_onehot has nonzero rows on masked nodes")
        rows = self.categories_onehot[mask]
        if not np.isin(rows, (0, 1)).all() or (rows.sum(axis=1) != 1).any():
            bad_row = int(np.flatnonzero(self.node_mask)[np.argmax(rows.sum(axis=1) != 1)])
            raise GraphValidationError(f"node {bad_row} does not have exactly one category bit set")
        if self.positions is not None:
            if self.positions.shape != (self.n_nodes, 2):
                raise ShapeError(
                    f"positions shape {self.positions.shape} != ({self.n_nodes}, 2)"
                )
            if not np.isfinite(self.positions).all():
                raise GraphValidationError("positions contain non-finite coordinates")

    def copy(self) -> "WalkingGraph":
        return WalkingGraph(
            categories_onehot=self.categories_onehot.copy(),
            adjacency=self.adjacency.copy(),
            node_mask=self.node_mask.copy(),
            positions=None if self.positions is None else self.positions.copy(),
        )

    def equals(self, other: "WalkingGraph") -> bool:
        if (self.positions is None) != (other.positions is None):
            return False
        pos_ok = (
            self.positions is None
            or (self.positions.shape == other.positions.shape
                and np.array_equal(self.positions, other.positions))
        )
        return (
            pos_ok
            and np.array_equal(self.categories_onehot, other.categories_onehot)
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.node_mask, other.node_mask)
        )


@dataclass
class RegionRecord:
    """Per-region conditioning inputs.

    ``urban_attributes`` is the 4-vector (population, elderly population,
    mean housing price, property fee); ``demand`` the per-category supply
    class in {0,1,2,3}; ``grid_features`` the (n_max, d_f) synthetic node
    feature matrix standing in for textual facility descriptions.
    """

    region_id: int
    urban_attributes: np.ndarray
    demand: np.ndarray
    grid_features: np.ndarray
    population: int
    elderly_population: int

    def validate(self, k_cat: int) -> None:
        if self.demand.shape != (k_cat,):
            raise ShapeError(f"demand shape {self.demand.shape} != ({k_cat},)")
        if not np.isin(self.demand, (0, 1, 2, 3)).all():
            raise GraphValidationError(
                f"region {self.region_id}: demand values must be in {{0,1,2,3}}"
            )
        if not (self.population >= self.elderly_population >= 0):
            raise GraphValidationError(
                f"region {self.region_id}: need population >= elderly_population >= 0"
            )


@dataclass
class Dataset:
    """A set of grid regions with their walking graphs.

    Immutable by convention after construction; all graphs share the same
    padded capacity and category table.
    """

    records: list[tuple[RegionRecord, WalkingGraph]]
    categories: list[FacilityCategory] = field(default_factory=default_categories)
    grid_size_m: float = DEFAULT_GRID_SIZE_M
    walk_threshold_m: float = DEFAULT_WALK_THRESHOLD_M
    feature_seed: int = 0

    @property
    def n_max(self) -> int:
        return self.records[0][1].n_max

    @property
    def k_cat(self) -> int:
        return len(self.categories)

    def __len__(self) -> int:
        return len(self.records)

    def graphs(self) -> list[WalkingGraph]:
        return [g for _, g in self.records]

    def region_records(self) -> list[RegionRecord]:
        return [r for r, _ in self.records]

    def validate(self) -> None:
        validate_categories(self.categories)
        if self.walk_threshold_m >= self.grid_size_m:
            raise ConfigError("walk_threshold_m must be smaller than grid_size_m")
        if not self.records:
            raise ConfigError("dataset has no records")
        n_max = self.n_max
        for record, graph in self.records:
            if graph.n_max != n_max or graph.k_cat != self.k_cat:
                raise ShapeError(
                    f"region {record.region_id}: graph capacity/categories differ from dataset"
                )
            graph.validate()
            record.validate(self.k_cat)

    def equals(self, other: "Dataset") -> bool:
        if (
            len(self) != len(other)
            or self.categories != other.categories
            or self.grid_size_m != other.grid_size_m
            or self.walk_threshold_m != other.walk_threshold_m
            or self.feature_seed != other.feature_seed
        ):
            return False
        for (rec_a, g_a), (rec_b, g_b) in zip(self.records, other.records):
            if rec_a.region_id != rec_b.region_id:
                return False
            if not (
                np.array_equal(rec_a.urban_attributes, rec_b.urban_attributes)
                and np.array_equal(rec_a.demand, rec_b.demand)
                and np.array_equal(rec_a.grid_features, rec_b.grid_features)
                and rec_a.population == rec_b.population
                and rec_a.elderly_population == rec_b.elderly_population
            ):
                return False
            if not g_a.equals(g_b):
                return False
        return True
