"""Dataset serialization: JSON-lines, one region per line after a header.

Header: {"version", "k_cat", "n_max", "grid_size_m", "walk_threshold_m",
"feature_seed", "feature_dim", "categories": [...]}. Region lines:
{"region_id", "attributes", "demand", "population", "elderly_population",
"nodes": [{"cat", "x_m", "y_m"}], "edges": [[i, j], ...]}. Grid features are
re-derived deterministically from (feature_seed, region_id, nodes), so they
are not stored. Writing is atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import DatasetFormatError, GraphValidationError
from .graph import build_walking_graph
from .synth import FEATURE_DIM, derive_grid_features
from .types import Dataset, FacilityCategory, RegionRecord, WalkingGraph, validate_categories

FORMAT_VERSION = 1


def _category_to_json(c: FacilityCategory) -> dict:
    return {
        "id": c.id,
        "name": c.name,
        "is_residence": c.is_residence,
        "is_elderly": c.is_elderly,
        "is_life_service": c.is_life_service,
    }


def _region_to_json(record: RegionRecord, graph: WalkingGraph) -> dict:
    cats = graph.node_categories()
    if graph.positions is not None:
        pos = graph.positions
    else:
        pos = np.zeros((graph.n_nodes, 2))
    nodes = [
        {"cat": int(cats[i]), "x_m": float(pos[i, 0]), "y_m": float(pos[i, 1])}
        for i in range(graph.n_nodes)
    ]
    n = graph.n_nodes
    edges = [
        [i, j]
        for i in range(n)
        for j in range(i + 1, n)
        if graph.adjacency[i, j]
    ]
    return {
        "region_id": record.region_id,
        "attributes": [float(v) for v in record.urban_attributes],
        "demand": [int(v) for v in record.demand],
        "population": record.population,
        "elderly_population": record.elderly_population,
        "nodes": nodes,
        "edges": edges,
    }


def save_dataset(dataset: Dataset, path: str | Path, extra_header: dict | None = None) -> None:
    path = Path(path)
    header = {
        "version": FORMAT_VERSION,
        "k_cat": dataset.k_cat,
        "n_max": dataset.n_max,
        "grid_size_m": dataset.grid_size_m,
        "walk_threshold_m": dataset.walk_threshold_m,
        "feature_seed": dataset.feature_seed,
        "feature_dim": dataset.records[0][0].grid_features.shape[1],
        "categories": [_category_to_json(c) for c in dataset.categories],
    }
    if extra_header:
        header.update(extra_header)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for record, graph in dataset.records:
            fh.write(json.dumps(_region_to_json(record, graph)) + "\n")
    os.replace(tmp, path)


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {lineno}: expected a JSON object")
    return obj


def _require(obj: dict, key: str, lineno: int):
    if key not in obj:
        raise DatasetFormatError(f"line {lineno}: missing field {key!r}")
    return obj[key]


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty dataset file")

    header = _parse_line(lines[0], 1)
    version = _require(header, "version", 1)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"line 1: unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    k_cat = _require(header, "k_cat", 1)
    n_max = _require(header, "n_max", 1)
    grid_size = _require(header, "grid_size_m", 1)
    threshold = _require(header, "walk_threshold_m", 1)
    feature_seed = _require(header, "feature_seed", 1)
    feature_dim = header.get("feature_dim", FEATURE_DIM)
    categories = [
        FacilityCategory(
            id=c["id"],
            name=c["name"],
            is_residence=c["is_residence"],
            is_elderly=c["is_elderly"],
            is_life_service=c["is_life_service"],
        )
        for c in _require(header, "categories", 1)
    ]
    if len(categories) != k_cat:
        raise DatasetFormatError("line 1: category table does not match k_cat")
    validate_categories(categories)

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise DatasetFormatError(f"line {lineno}: blank line inside dataset")
        obj = _parse_line(line, lineno)
        try:
            region_id = int(_require(obj, "region_id", lineno))
            nodes = _require(obj, "nodes", lineno)
            n = len(nodes)
            cats = np.array([int(nd["cat"]) for nd in nodes], dtype=int)
            pos = np.array([[float(nd["x_m"]), float(nd["y_m"])] for nd in nodes])
            edges = _require(obj, "edges", lineno)
            adj = np.zeros((n_max, n_max), dtype=np.int8)
            for pair in edges:
                if len(pair) != 2:
                    raise DatasetFormatError(
                        f"line {lineno}: edge {pair} is not a node pair"
                    )
                i, j = int(pair[0]), int(pair[1])
                if i == j or not (0 <= i < n and 0 <= j < n):
                    raise GraphValidationError(
                        f"line {lineno}: invalid edge pair ({i}, {j}) for {n} nodes"
                    )
                adj[i, j] = 1
                adj[j, i] = 1
            onehot = np.zeros((n_max, k_cat), dtype=np.int8)
            onehot[np.arange(n), cats] = 1
            mask = np.zeros(n_max, dtype=bool)
            mask[:n] = True
            graph = WalkingGraph(
                categories_onehot=onehot, adjacency=adj, node_mask=mask, positions=pos
            )
            graph.validate()
            record = RegionRecord(
                region_id=region_id,
                urban_attributes=np.array(
                    [float(v) for v in _require(obj, "attributes", lineno)]
                ),
                demand=np.array([int(v) for v in _require(obj, "demand", lineno)]),
                grid_features=derive_grid_features(
                    feature_seed, region_id, cats, pos, n_max, k_cat, feature_dim, grid_size
                ),
                population=int(_require(obj, "population", lineno)),
                elderly_population=int(_require(obj, "elderly_population", lineno)),
            )
            record.validate(k_cat)
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise DatasetFormatError(f"line {lineno}: malformed region record ({exc})") from exc
        records.append((record, graph))

    dataset = Dataset(
        records=records,
        categories=categories,
        grid_size_m=grid_size,
        walk_threshold_m=threshold,
        feature_seed=feature_seed,
    )
    dataset.validate()
    return dataset


__all__ = ["save_dataset", "load_dataset", "FORMAT_VERSION", "build_walking_graph"]
