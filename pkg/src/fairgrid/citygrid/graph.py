"""Walking-graph construction and batch padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import CapacityError, InputError
from .types import DEFAULT_N_MAX, WalkingGraph


def build_walking_graph(
    positions: np.ndarray,
    categories: np.ndarray,
    walk_threshold_m: float,
    k_cat: int,
    n_max: int = DEFAULT_N_MAX,
) -> WalkingGraph:
    """Build a padded walking graph from node positions and categories.

    Two distinct nodes are connected iff their Euclidean distance is at most
    ``walk_threshold_m`` (the 15-minute-walk proxy).
    """
    positions = np.asarray(positions, dtype=float)
    categories = np.asarray(categories, dtype=int)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise InputError(f"positions must be (n, 2), got {positions.shape}")
    n = positions.shape[0]
    if n < 1:
        raise InputError("need at least one node")
    if not np.isfinite(positions).all():
        raise InputError("positions contain non-finite coordinates")
    if walk_threshold_m <= 0:
        raise InputError("walk_threshold_m must be positive")
    if n > n_max:
        raise CapacityError(f"{n} nodes exceed capacity n_max={n_max}")
    if categories.shape != (n,):
        raise InputError(f"categories must be ({n},), got {categories.shape}")
    if categories.min() < 0 or categories.max() >= k_cat:
        raise InputError("category ids out of range")

    onehot = np.zeros((n_max, k_cat), dtype=np.int8)
    onehot[np.arange(n), categories] = 1

    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    adj = np.zeros((n_max, n_max), dtype=np.int8)
    within = (dist <= walk_threshold_m).astype(np.int8)
    np.fill_diagonal(within, 0)
    adj[:n, :n] = within

    mask = np.zeros(n_max, dtype=bool)
    mask[:n] = True
    graph = WalkingGraph(
        categories_onehot=onehot, adjacency=adj, node_mask=mask, positions=positions.copy()
    )
    graph.validate()
    return graph


@dataclass
class GraphBatch:
    """Dense padded tensors for a list of graphs.

    ``categories`` is (B, W, K) float, ``adjacency`` (B, W, W) float and
    ``mask`` (B, W) bool; padded entries are exactly zero. ``n_max`` remembers
    the graphs' original capacity so unbatching restores them bit-for-bit.
    """

    categories: np.ndarray
    adjacency: np.ndarray
    mask: np.ndarray
    n_max: int


def pad_batch(graphs: list[WalkingGraph], width: int | None = None) -> GraphBatch:
    """Stack graphs into padded dense arrays.

    ``width`` defaults to the graphs' capacity; a smaller width is allowed
    when every graph fits (contiguous masks), which keeps training batches
    compact.
    """
    if not graphs:
        raise InputError("cannot batch zero graphs")
    n_max = graphs[0].n_max
    if width is None:
        width = n_max
    cats = np.zeros((len(graphs), width, graphs[0].k_cat), dtype=np.float64)
    adj = np.zeros((len(graphs), width, width), dtype=np.float64)
    mask = np.zeros((len(graphs), width), dtype=bool)
    for b, g in enumerate(graphs):
        n = g.n_nodes
        if n > width:
            raise CapacityError(f"graph {b} has {n} nodes > batch width {width}")
        if not g.node_mask[:n].all():
            raise InputError("pad_batch requires contiguous node masks")
        cats[b, :n] = g.categories_onehot[:n]
        adj[b, :n, :n] = g.adjacency[:n, :n]
        mask[b, :n] = True
    return GraphBatch(categories=cats, adjacency=adj, mask=mask, n_max=n_max)


def unpad_batch(batch: GraphBatch, positions: list[np.ndarray | None] | None = None) -> list[WalkingGraph]:
    """Invert pad_batch; returns graphs at their original capacity."""
    graphs = []
    k_cat = batch.categories.shape[2]
    for b in range(batch.categories.shape[0]):
        n = int(batch.mask[b].sum())
        onehot = np.zeros((batch.n_max, k_cat), dtype=np.int8)
        onehot[:n] = np.rint(batch.categories[b, :n]).astype(np.int8)
        adj = np.zeros((batch.n_max, batch.n_max), dtype=np.int8)
        adj[:n, :n] = np.rint(batch.adjacency[b, :n, :n]).astype(np.int8)
        mask = np.zeros(batch.n_max, dtype=bool)
        mask[:n] = True
        pos = None if positions is None else positions[b]
        graphs.append(
            WalkingGraph(categories_onehot=onehot, adjacency=adj, node_mask=mask, positions=pos)
        )
    return graphs
