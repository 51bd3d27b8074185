"""Gridded-city data model, synthetic generation, demand classes and I/O."""

from .demand import APPROPRIATE, NO_SUPPLY, OVERSUPPLIED, UNDER_SUPPLIED, DemandBands, classify_demand
from .graph import GraphBatch, build_walking_graph, pad_batch, unpad_batch
from .io import FORMAT_VERSION, load_dataset, save_dataset
from .synth import FEATURE_DIM, GeneratorConfig, derive_grid_features, generate_synthetic_city
from .types import (
    DEFAULT_GRID_SIZE_M,
    DEFAULT_N_MAX,
    DEFAULT_WALK_THRESHOLD_M,
    MAX_REGION_NODES,
    MIN_REGION_NODES,
    Dataset,
    FacilityCategory,
    RegionRecord,
    WalkingGraph,
    default_categories,
    residence_category_id,
    validate_categories,
)

__all__ = [
    "APPROPRIATE",
    "DEFAULT_GRID_SIZE_M",
    "DEFAULT_N_MAX",
    "DEFAULT_WALK_THRESHOLD_M",
    "Dataset",
    "DemandBands",
    "FEATURE_DIM",
    "FORMAT_VERSION",
    "FacilityCategory",
    "GeneratorConfig",
    "GraphBatch",
    "MAX_REGION_NODES",
    "MIN_REGION_NODES",
    "NO_SUPPLY",
    "OVERSUPPLIED",
    "RegionRecord",
    "UNDER_SUPPLIED",
    "WalkingGraph",
    "build_walking_graph",
    "classify_demand",
    "default_categories",
    "derive_grid_features",
    "generate_synthetic_city",
    "load_dataset",
    "pad_batch",
    "residence_category_id",
    "save_dataset",
    "unpad_batch",
    "validate_categories",
]
