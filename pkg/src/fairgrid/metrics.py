"""Spatial-equity evaluation suite.

Scores a set of generated (or existing) layouts: efficiency of life-service
and elderly-care coverage, category diversity, population-normalized
accessibility, a Gini equity statistic over per-region composites, the signed
average that aggregates all five, and a local Moran's I for spatial-disparity
analysis. Everything is written as plain loops; inputs are desk-scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .citygrid import Dataset, FacilityCategory, WalkingGraph, residence_category_id
from .errors import DegenerateInputError, InputError, ShapeError

POPULATION_UNIT = 1000.0


def _node_lists(graph: WalkingGraph, categories: list[FacilityCategory]):
    """Residence indices H and per-category node index lists N_k."""
    res_id = residence_category_id(categories)
    cats = graph.node_categories()
    residences = [i for i in range(graph.n_nodes) if cats[i] == res_id]
    by_cat = {c.id: [i for i in range(graph.n_nodes) if cats[i] == c.id] for c in categories}
    return residences, by_cat


def life_service_ids(categories: list[FacilityCategory]) -> list[int]:
    return [c.id for c in categories if c.is_life_service]


def elderly_ids(categories: list[FacilityCategory]) -> list[int]:
    return [c.id for c in categories if c.is_elderly]


def region_efficiency(
    graph: WalkingGraph,
    categories: list[FacilityCategory],
    category_filter: list[int],
    mode: str = "coverage",
) -> float | None:
    """Coverage of residences by the filtered categories for one region.

    coverage mode divides each category term by the residence count (value in
    [0, 1]); literal mode divides by the facility count of that category
    instead, which can exceed 1. Returns None when the region has no
    residences.
    """
    if mode not in ("coverage", "literal"):
        raise InputError(f"unknown efficiency mode {mode!r}")
    if not category_filter:
        raise InputError("category_filter must name at least one category")
    residences, by_cat = _node_lists(graph, categories)
    if not residences:
        return None
    adj = graph.adjacency
    total = 0.0
    for k in category_filter:
        nodes_k = by_cat[k]
        if not nodes_k:
            continue
        covered = 0.0
        for h in residences:
            best = 0.0
            for n in nodes_k:
                if adj[n, h] > best:
                    best = float(adj[n, h])
            covered += best
        denom = len(residences) if mode == "coverage" else len(nodes_k)
        total += covered / denom
    return total / len(category_filter)


def efficiency(
    layouts: list[WalkingGraph],
    categories: list[FacilityCategory],
    category_filter: list[int],
    mode: str = "coverage",
) -> float:
    """Mean regional efficiency; regions without residences are skipped."""
    values = []
    for graph in layouts:
        v = region_efficiency(graph, categories, category_filter, mode)
        if v is not None:
            values.append(v)
    if not values:
        raise DegenerateInputError("no region has residences; efficiency undefined")
    return sum(values) / len(values)


def region_diversity(graph: WalkingGraph, categories: list[FacilityCategory]) -> float:
    """Fraction of the non-residence categories present in the region."""
    res_id = residence_category_id(categories)
    present = set()
    for c in graph.node_categories():
        if c != res_id:
            present.add(int(c))
    return len(present) / (len(categories) - 1)


def diversity(layouts: list[WalkingGraph], categories: list[FacilityCategory]) -> float:
    values = [region_diversity(g, categories) for g in layouts]
    return sum(values) / len(values)


def region_accessibility(
    graph: WalkingGraph,
    population: int,
    categories: list[FacilityCategory],
    u: float = POPULATION_UNIT,
) -> float | None:
    """Raw covered-residence count per unit population, averaged over the
    non-residence categories. Halves when the population doubles; may exceed 1
    for small regions. Returns None when the region has no residences."""
    if population <= 0:
        raise DegenerateInputError("region population must be positive for accessibility")
    residences, by_cat = _node_lists(graph, categories)
    if not residences:
        return None
    facility_cats = [c.id for c in categories if not c.is_residence]
    adj = graph.adjacency
    total = 0.0
    for k in facility_cats:
        nodes_k = by_cat[k]
        if not nodes_k:
            continue
        covered = 0.0
        for h in residences:
            best = 0.0
            for n in nodes_k:
                if adj[n, h] > best:
                    best = float(adj[n, h])
            covered += best
        total += covered
    return (total / len(facility_cats)) / (population / u)


def accessibility(
    layouts: list[WalkingGraph],
    populations: list[int],
    categories: list[FacilityCategory],
    u: float = POPULATION_UNIT,
) -> float:
    """Mean regional accessibility, each region capped at 1 for reporting."""
    if len(layouts) != len(populations):
        raise ShapeError("layouts and populations must align")
    values = []
    for graph, pop in zip(layouts, populations):
        raw = region_accessibility(graph, pop, categories, u)
        if raw is not None:
            values.append(min(raw, 1.0))
    if not values:
        raise DegenerateInputError("no region has residences; accessibility undefined")
    return sum(values) / len(values)


def gini_coefficient(values: list[float]) -> float:
    """Equity statistic over per-region scores, literal double-cumulative form.

    Note the form is offset-negative at perfect equality (constant input of
    size N gives -1/N) and reaches 1 - 2/N at maximal concentration.
    """
    n = len(values)
    if n < 2:
        raise DegenerateInputError("gini needs at least two regions")
    for v in values:
        if v < 0:
            raise InputError("gini inputs must be non-negative")
    ordered = sorted(values)
    # Summing in sorted order makes the statistic bitwise permutation-invariant.
    total = 0.0
    for v in ordered:
        total += v
    if total <= 0:
        raise DegenerateInputError("gini undefined for all-zero inputs")
    double_sum = 0.0
    for i in range(n):
        for j in range(i + 1):
            double_sum += ordered[j]
    return 1.0 - 2.0 * double_sum / (n * total)


def average_score(
    life_service: float,
    elderly_care: float,
    diversity_value: float,
    accessibility_value: float,
    gini_value: float,
) -> float:
    """Signed five-metric aggregate; the equity statistic is negated."""
    return (life_service + elderly_care + diversity_value + accessibility_value - gini_value) / 5.0


def local_morans_i(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-region local Moran's I given row-standardized spatial weights."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n = len(values)
    if n < 3:
        raise InputError("local Moran's I needs at least three regions")
    if weights.shape != (n, n):
        raise ShapeError(f"weights must be ({n}, {n}), got {weights.shape}")
    mean = 0.0
    for v in values:
        mean += v
    mean /= n
    m2 = 0.0
    for v in values:
        m2 += (v - mean) ** 2
    m2 /= n
    if m2 == 0.0:
        raise DegenerateInputError("local Moran's I undefined for constant values")
    out = np.empty(n)
    for i in range(n):
        lag = 0.0
        for j in range(n):
            lag += weights[i, j] * (values[j] - mean)
        out[i] = (values[i] - mean) / m2 * lag
    return out


def row_standardize(weights: np.ndarray) -> np.ndarray:
    """Scale each weight row to sum to 1 (rows without neighbours stay zero)."""
    weights = np.asarray(weights, dtype=float).copy()
    for i in range(weights.shape[0]):
        s = weights[i].sum()
        if s > 0:
            weights[i] /= s
    return weights


def grid_rook_weights(n_regions: int) -> np.ndarray:
    """Row-standardized 4-neighbour weights for regions laid out row-major on
    a near-square grid (used when a dataset carries no explicit geometry)."""
    cols = int(math.ceil(math.sqrt(n_regions)))
    w = np.zeros((n_regions, n_regions))
    for r in range(n_regions):
        row, col = divmod(r, cols)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = row + dr, col + dc
            if rr < 0 or cc < 0 or cc >= cols:
                continue
            q = rr * cols + cc
            if q < n_regions:
                w[r, q] = 1.0
    return row_standardize(w)


@dataclass
class MetricsReport:
    """Five headline metrics plus per-region components.

    ``average`` always equals (life + elderly + diversity + accessibility -
    gini) / 5 of its own fields. ``per_region`` rows carry the composite used
    for the Gini statistic and the raw (uncapped) accessibility value.
    """

    life_service: float
    elderly_care: float
    diversity: float
    accessibility: float
    gini: float
    average: float
    per_region: list[dict] = field(default_factory=list)
    regions_scored: int = 0
    regions_skipped: int = 0

    def to_json(self) -> dict:
        return {
            "life_service": self.life_service,
            "elderly_care": self.elderly_care,
            "diversity": self.diversity,
            "accessibility": self.accessibility,
            "gini": self.gini,
            "average": self.average,
            "regions_scored": self.regions_scored,
            "regions_skipped": self.regions_skipped,
            "per_region": self.per_region,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(
            life_service=obj["life_service"],
            elderly_care=obj["elderly_care"],
            diversity=obj["diversity"],
            accessibility=obj["accessibility"],
            gini=obj["gini"],
            average=obj["average"],
            per_region=obj.get("per_region", []),
            regions_scored=obj.get("regions_scored", 0),
            regions_skipped=obj.get("regions_skipped", 0),
        )


def evaluate_layouts(
    layouts: list[WalkingGraph],
    dataset: Dataset,
    u: float = POPULATION_UNIT,
) -> MetricsReport:
    """Score layouts aligned one-to-one with the dataset's regions.

    The Gini composite per region is the mean of its life-service,
    elderly-care and (capped) accessibility values. Regions without
    residences are skipped from every aggregate.
    """
    if len(layouts) != len(dataset.records):
        raise ShapeError(
            f"{len(layouts)} layouts do not align with {len(dataset.records)} regions"
        )
    categories = dataset.categories
    life_ids = life_service_ids(categories)
    eld_ids = elderly_ids(categories)

    per_region = []
    life_vals, eld_vals, div_vals, acc_vals, composites = [], [], [], [], []
    skipped = 0
    for (record, _), graph in zip(dataset.records, layouts):
        life = region_efficiency(graph, categories, life_ids, "coverage")
        div = region_diversity(graph, categories)
        if life is None:
            skipped += 1
            per_region.append({"region_id": record.region_id, "skipped": True})
            continue
        eld = region_efficiency(graph, categories, eld_ids, "coverage")
        acc_raw = region_accessibility(graph, record.population, categories, u)
        acc = min(acc_raw, 1.0)
        composite = (life + eld + acc) / 3.0
        life_vals.append(life)
        eld_vals.append(eld)
        div_vals.append(div)
        acc_vals.append(acc)
        composites.append(composite)
        per_region.append(
            {
                "region_id": record.region_id,
                "life_service": life,
                "elderly_care": eld,
                "diversity": div,
                "accessibility": acc,
                "accessibility_raw": acc_raw,
                "composite": composite,
            }
        )
    if not composites:
        raise DegenerateInputError("no region could be scored (no residences anywhere)")

    life_m = sum(life_vals) / len(life_vals)
    eld_m = sum(eld_vals) / len(eld_vals)
    div_m = sum(div_vals) / len(div_vals)
    acc_m = sum(acc_vals) / len(acc_vals)
    gini_v = gini_coefficient(composites)
    return MetricsReport(
        life_service=life_m,
        elderly_care=eld_m,
        diversity=div_m,
        accessibility=acc_m,
        gini=gini_v,
        average=average_score(life_m, eld_m, div_m, acc_m, gini_v),
        per_region=per_region,
        regions_scored=len(composites),
        regions_skipped=skipped,
    )


def render_comparison(reports: dict[str, MetricsReport]) -> str:
    """Aligned text table of named reports, one row per allocation method."""
    headers = ["Model", "Life Service", "Elderly Care", "Diversity", "Accessibility", "Gini", "Average"]
    rows = [
        [
            name,
            f"{r.life_service:.3f}",
            f"{r.elderly_care:.3f}",
            f"{r.diversity:.3f}",
            f"{r.accessibility:.3f}",
            f"{r.gini:.3f}",
            f"{r.average:.3f}",
        ]
        for name, r in reports.items()
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)
