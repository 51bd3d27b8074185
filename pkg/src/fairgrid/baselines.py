"""Reference allocation methods: status-quo scoring and greedy max-min
dominant-share allocation.

The walking-based baseline evaluates a dataset's existing layouts unchanged.
The dominant-resource allocator derives per-category facility requirements
from the demand classes (regions classed "no supply" or "under supplied"
must reach the midpoint of the appropriate band), then repeatedly grants one
facility of its most-deficient category to the region with the lowest
dominant share, placing the new node next to the least-covered residence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .citygrid import (
    Dataset,
    DemandBands,
    WalkingGraph,
    build_walking_graph,
    residence_category_id,
)
from .errors import ConfigError, InputError
from .metrics import MetricsReport, evaluate_layouts

# Offset (metres) of a granted facility from its target residence.
_PLACEMENT_OFFSET = 7.5


@dataclass
class AllocationBudget:
    """Facility units available per category plus a per-region cap."""

    total_units: np.ndarray
    per_region_cap: int

    def __post_init__(self):
        self.total_units = np.asarray(self.total_units, dtype=np.int64)
        if (self.total_units < 0).any():
            raise ConfigError("budget counts must be non-negative")
        if self.per_region_cap < 1:
            raise ConfigError("per_region_cap must be at least 1")

    def to_json(self) -> dict:
        return {
            "total_units": [int(v) for v in self.total_units],
            "per_region_cap": self.per_region_cap,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AllocationBudget":
        return cls(
            total_units=np.asarray(obj["total_units"], dtype=np.int64),
            per_region_cap=int(obj["per_region_cap"]),
        )


@dataclass
class DrfGrant:
    """One allocation decision, enough to replay the run."""

    step: int
    region_id: int
    category: int
    share_before: float
    x_m: float
    y_m: float

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "region_id": self.region_id,
            "category": self.category,
            "share_before": self.share_before,
            "x_m": self.x_m,
            "y_m": self.y_m,
        }


def walking_based(dataset: Dataset) -> tuple[list[WalkingGraph], MetricsReport]:
    """Score the dataset's existing layouts as-is (the status-quo row)."""
    layouts = [g.copy() for g in dataset.graphs()]
    report = evaluate_layouts(layouts, dataset)
    return layouts, report


def requirements_from_demand(
    dataset: Dataset, bands: DemandBands | None = None
) -> np.ndarray:
    """(regions, k_cat) facility requirements; zero where demand is met.

    Regions classed 0 or 1 for a category must reach the band midpoint per
    thousand residents; categories already at class 2 or 3 need nothing.
    """
    if bands is None:
        bands = DemandBands.defaults(dataset.categories)
    mids = bands.midpoints()
    req = np.zeros((len(dataset), dataset.k_cat), dtype=np.int64)
    for r, (record, _) in enumerate(dataset.records):
        for k in range(dataset.k_cat):
            if record.demand[k] in (0, 1):
                req[r, k] = max(1, math.ceil(mids[k] * record.population / 1000.0))
    res_id = residence_category_id(dataset.categories)
    req[:, res_id] = 0
    return req


@dataclass
class _RegionState:
    region_id: int
    positions: list
    cats: list
    res_positions: np.ndarray
    coverage: np.ndarray  # facilities within threshold of each residence
    fac_count: int


def drf_allocate(
    dataset: Dataset,
    budget: AllocationBudget,
    bands: DemandBands | None = None,
) -> tuple[list[WalkingGraph], list[DrfGrant]]:
    """Greedy dominant-share allocation over the dataset's regions.

    Deterministic: ties on share break by region id, ties on deficiency by
    category id. Returns rebuilt layouts plus the grant log. When no region
    derives any requirement the input layouts come back unchanged with an
    empty log.
    """
    if budget.total_units.shape[0] != dataset.k_cat:
        raise ConfigError("budget categories do not match the dataset")
    res_id = residence_category_id(dataset.categories)
    req = requirements_from_demand(dataset, bands)
    remaining = budget.total_units.copy()

    alloc = np.zeros_like(req)
    states: list[_RegionState] = []
    threshold = dataset.walk_threshold_m
    for r, (record, graph) in enumerate(dataset.records):
        cats = graph.node_categories()
        if graph.positions is None:
            raise InputError(
                f"region {record.region_id}: allocation needs node positions"
            )
        pos = graph.positions
        # Existing supply counts toward the requirement.
        counts = np.bincount(cats, minlength=dataset.k_cat)
        alloc[r] = counts
        res_idx = [i for i in range(graph.n_nodes) if cats[i] == res_id]
        res_pos = pos[res_idx] if res_idx else np.zeros((0, 2))
        coverage = np.zeros(len(res_idx), dtype=np.int64)
        for ri, h in enumerate(res_idx):
            c = 0
            for j in range(graph.n_nodes):
                if j != h and cats[j] != res_id and graph.adjacency[j, h]:
                    c += 1
            coverage[ri] = c
        fac_count = int(graph.n_nodes - len(res_idx))
        if fac_count > budget.per_region_cap:
            raise ConfigError(
                f"region {record.region_id} already exceeds per_region_cap"
            )
        states.append(
            _RegionState(
                region_id=record.region_id,
                positions=[tuple(p) for p in pos],
                cats=list(cats),
                res_positions=res_pos,
                coverage=coverage,
                fac_count=fac_count,
            )
        )

    if not (req > alloc).any():
        return [g.copy() for g in dataset.graphs()], []

    def dominant_share(r: int) -> float:
        needy = req[r] > 0
        if not needy.any():
            return math.inf
        return float((alloc[r][needy] / req[r][needy]).max())

    grants: list[DrfGrant] = []
    n_max = dataset.n_max
    step = 0
    while remaining.sum() > 0:
        best_r, best_share = -1, math.inf
        for r in range(len(states)):
            unmet = (alloc[r] < req[r]) & (remaining > 0)
            if not unmet.any():
                continue
            if states[r].fac_count >= budget.per_region_cap:
                continue
            if len(states[r].positions) >= n_max:
                continue
            share = dominant_share(r)
            if share < best_share:
                best_share, best_r = share, r
        if best_r < 0:
            break
        r = best_r
        unmet = np.flatnonzero((alloc[r] < req[r]) & (remaining > 0))
        ratios = alloc[r][unmet] / req[r][unmet]
        k = int(unmet[int(np.argmin(ratios))])

        state = states[r]
        if len(state.res_positions) == 0:
            target = np.array([0.0, 0.0])
        else:
            target = state.res_positions[int(np.argmin(state.coverage))]
        new_pos = (
            min(target[0] + _PLACEMENT_OFFSET, dataset.grid_size_m),
            float(target[1]),
        )
        grants.append(
            DrfGrant(
                step=step,
                region_id=state.region_id,
                category=k,
                share_before=best_share,
                x_m=new_pos[0],
                y_m=new_pos[1],
            )
        )
        state.positions.append(new_pos)
        state.cats.append(k)
        state.fac_count += 1
        for ri in range(len(state.res_positions)):
            d = math.hypot(
                new_pos[0] - state.res_positions[ri][0],
                new_pos[1] - state.res_positions[ri][1],
            )
            if d <= threshold:
                state.coverage[ri] += 1
        alloc[r, k] += 1
        remaining[k] -= 1
        step += 1
        if not ((alloc < req) & (remaining[None, :] > 0)).any():
            break

    layouts = []
    for state in states:
        layouts.append(
            build_walking_graph(
                np.asarray(state.positions, dtype=float),
                np.asarray(state.cats, dtype=int),
                threshold,
                dataset.k_cat,
                n_max=n_max,
            )
        )
    return layouts, grants
