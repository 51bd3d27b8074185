"""Attention-based fair-demand conditioning with max-min entropy pretraining.

A region's urban attributes and demand classes form a single query against
its per-node grid features; the attended context, broadcast over nodes and
gated elementwise by the projected features, is the condition embedding fed
to the diffusion denoiser. Pretraining pushes the batch-mean category
distribution toward maximal minimum per-category entropy, i.e. away from
concentrating probability on a few facility types.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn

from .citygrid import Dataset
from .errors import DegenerateInputError, InputError, ShapeError, TrainingError

# Fixed scales that bring the urban attribute vector to O(1):
# population, elderly population, mean housing price, property fee.
ATTRIBUTE_SCALE = (1e4, 1e4, 1e5, 10.0)
DEMAND_SCALE = 3.0


class FairDemandModule(nn.Module):
    """Single-head demand attention over grid features plus a category head.

    Weights: query projection over [attributes ++ demand], key/value
    projections over grid features, a head projection on the attended
    context, and an output projection to per-category logits.
    """

    def __init__(self, attr_dim: int = 4, k_cat: int = 14, feature_dim: int = 16, hidden: int = 64):
        super().__init__()
        self.attr_dim = attr_dim
        self.k_cat = k_cat
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.w_q = nn.Linear(attr_dim + k_cat, hidden, bias=False)
        self.w_k = nn.Linear(feature_dim, hidden, bias=False)
        self.w_v = nn.Linear(feature_dim, hidden, bias=False)
        self.w_h = nn.Linear(hidden, hidden, bias=False)
        self.w_o = nn.Linear(hidden, k_cat, bias=False)
        scale = torch.tensor(ATTRIBUTE_SCALE[:attr_dim], dtype=torch.float64)
        self.register_buffer("attr_scale", scale)

    def demand_attention(
        self,
        attrs: torch.Tensor,
        demand: torch.Tensor,
        feats: torch.Tensor,
        mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Attend the region query over node features.

        Returns (H, alpha): H is the per-node broadcast of the attended
        context after the head projection, zero on masked rows; alpha the
        attention weights over unmasked nodes (each region's row sums to 1).
        """
        if feats.shape[-1] != self.feature_dim:
            raise ShapeError(
                f"feature width {feats.shape[-1]} != configured {self.feature_dim}"
            )
        query_in = torch.cat([attrs / self.attr_scale, demand / DEMAND_SCALE], dim=-1)
        q = self.w_q(query_in)
        k = self.w_k(feats)
        logits = (k @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(self.hidden)
        neg = torch.finfo(logits.dtype).max / 4
        logits = logits.masked_fill(~mask, -neg)
        alpha = torch.softmax(logits, dim=-1)
        context = (alpha.unsqueeze(-1) * self.w_v(feats)).sum(dim=1)
        row = self.w_h(context)
        h = row.unsqueeze(1) * mask.unsqueeze(-1).to(row.dtype)
        return h, alpha

    def forward(
        self,
        attrs: torch.Tensor,
        demand: torch.Tensor,
        feats: torch.Tensor,
        mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (condition embedding C, category logits O).

        C gates the attended representation elementwise with the projected
        grid features; O pools the representation over unmasked nodes and
        projects it to category logits for the pretraining objective.
        """
        h, _ = self.demand_attention(attrs, demand, feats, mask)
        f_proj = self.w_v(feats)
        cond = condition_embedding(h, f_proj, mask)
        pooled = h.sum(dim=1) / mask.sum(dim=1, keepdim=True).to(h.dtype).clamp(min=1.0)
        logits = self.w_o(pooled)
        return cond, logits


def condition_embedding(
    h: torch.Tensor, f_proj: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Elementwise (Hadamard) product of the attended rows with the projected
    features; masked rows are zero."""
    if h.shape != f_proj.shape:
        raise ShapeError(f"shape mismatch {tuple(h.shape)} vs {tuple(f_proj.shape)}")
    out = h * f_proj
    if mask is not None:
        out = out * mask.unsqueeze(-1).to(out.dtype)
    return out


def fairness_loss(logits: torch.Tensor, residence_mask: torch.Tensor) -> torch.Tensor:
    """Max-min entropy objective on a batch of category logits.

    Rows are softmaxed with residence categories forced to probability zero,
    averaged over the batch, renormalized, and scored by the smallest
    per-category entropy term e_j = -p_j log p_j (with 0 log 0 = 0). The loss
    is 1 / (min_j e_j + 1); it lives in (1/(1 + 1/e), 1].
    """
    if logits.dim() != 2:
        raise ShapeError(f"logits must be (batch, k_cat), got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise InputError("fairness loss requires finite logits")
    residence_mask = residence_mask.to(torch.bool)
    if residence_mask.all():
        raise DegenerateInputError("all categories are residence-masked")
    if logits.shape[1] != residence_mask.shape[0]:
        raise ShapeError("residence mask does not match category count")
    masked = logits.masked_fill(residence_mask.unsqueeze(0), float("-inf"))
    p = torch.softmax(masked, dim=-1)
    p_bar = p.mean(dim=0)
    p_bar = p_bar / p_bar.sum()
    ent = torch.where(
        p_bar > 0, -p_bar * torch.log(p_bar.clamp(min=1e-300)), torch.zeros_like(p_bar)
    )
    min_ent = ent[~residence_mask].min()
    return 1.0 / (min_ent + 1.0)


def min_category_entropy(logits: torch.Tensor, residence_mask: torch.Tensor) -> float:
    """The min_j e_j term underlying the loss, for progress tracking."""
    loss = fairness_loss(logits, residence_mask)
    return float(1.0 / loss - 1.0)


def _dataset_tensors(dataset: Dataset, dtype: torch.dtype):
    attrs = torch.stack(
        [torch.as_tensor(r.urban_attributes, dtype=dtype) for r in dataset.region_records()]
    )
    demand = torch.stack(
        [torch.as_tensor(r.demand, dtype=torch.int64).to(dtype) for r in dataset.region_records()]
    )
    feats = torch.stack(
        [torch.as_tensor(r.grid_features, dtype=dtype) for r in dataset.region_records()]
    )
    masks = torch.stack(
        [torch.as_tensor(g.node_mask, dtype=torch.bool) for g in dataset.graphs()]
    )
    return attrs, demand, feats, masks


def residence_mask_for(dataset: Dataset) -> torch.Tensor:
    return torch.tensor([c.is_residence for c in dataset.categories], dtype=torch.bool)


def pretrain_fair_demand(
    dataset: Dataset,
    epochs: int = 60,
    batch_size: int = 6,
    lr: float = 1e-5,
    seed: int = 0,
    hidden: int = 64,
    dtype: torch.dtype = torch.float64,
) -> tuple[FairDemandModule, dict]:
    """Train the fair-demand module on a dataset; deterministic under seed.

    Returns the trained module and a history dict with the full-set loss and
    min-entropy per epoch (index 0 is the initialization). If the loss goes
    non-finite the last finite parameters are kept and a TrainingError is
    raised.
    """
    if len(dataset) == 0:
        raise DegenerateInputError("cannot pretrain on an empty dataset")
    torch.manual_seed(seed)
    module = FairDemandModule(
        attr_dim=dataset.records[0][0].urban_attributes.shape[0],
        k_cat=dataset.k_cat,
        feature_dim=dataset.records[0][0].grid_features.shape[1],
        hidden=hidden,
    ).to(dtype)
    res_mask = residence_mask_for(dataset)
    attrs, demand, feats, masks = _dataset_tensors(dataset, dtype)
    n = attrs.shape[0]
    opt = torch.optim.Adam(module.parameters(), lr=lr)

    def full_set_stats() -> tuple[float, float]:
        with torch.no_grad():
            _, logits = module(attrs, demand, feats, masks)
            if not torch.isfinite(logits).all():
                raise TrainingError("fair-demand training diverged; last finite weights kept")
            loss = fairness_loss(logits, res_mask)
            return float(loss), float(1.0 / loss - 1.0)

    loss0, ent0 = full_set_stats()
    history = {"loss": [loss0], "min_entropy": [ent0]}
    last_good = copy.deepcopy(module.state_dict())
    for _ in range(epochs):
        perm = torch.randperm(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            _, logits = module(attrs[idx], demand[idx], feats[idx], masks[idx])
            if not torch.isfinite(logits).all():
                module.load_state_dict(last_good)
                raise TrainingError("fair-demand training diverged; last finite weights kept")
            loss = fairness_loss(logits, res_mask)
            if not torch.isfinite(loss):
                module.load_state_dict(last_good)
                raise TrainingError("fair-demand loss diverged; last finite weights kept")
            opt.zero_grad()
            loss.backward()
            opt.step()
        ep_loss, ep_ent = full_set_stats()
        history["loss"].append(ep_loss)
        history["min_entropy"].append(ep_ent)
        last_good = copy.deepcopy(module.state_dict())
    return module, history


def compute_condition_embeddings(
    module: FairDemandModule, dataset: Dataset, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """Frozen per-region condition embeddings, (regions, n_max, hidden)."""
    attrs, demand, feats, masks = _dataset_tensors(dataset, dtype)
    with torch.no_grad():
        cond, _ = module(attrs, demand, feats, masks)
    return cond


def fair_demand_state(module: FairDemandModule) -> dict:
    """Checkpoint payload with a shape header."""
    return {
        "attr_dim": module.attr_dim,
        "k_cat": module.k_cat,
        "feature_dim": module.feature_dim,
        "hidden": module.hidden,
        "state_dict": {k: v.clone() for k, v in module.state_dict().items()},
    }


def fair_demand_from_state(state: dict, dtype: torch.dtype = torch.float64) -> FairDemandModule:
    module = FairDemandModule(
        attr_dim=state["attr_dim"],
        k_cat=state["k_cat"],
        feature_dim=state["feature_dim"],
        hidden=state["hidden"],
    ).to(dtype)
    module.load_state_dict(state["state_dict"])
    return module


def demand_attention_numpy(
    module: FairDemandModule,
    attrs: np.ndarray,
    demand: np.ndarray,
    feats: np.ndarray,
    mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-region convenience wrapper over numpy inputs."""
    dtype = module.w_q.weight.dtype
    with torch.no_grad():
        h, alpha = module.demand_attention(
            torch.as_tensor(attrs, dtype=dtype).unsqueeze(0),
            torch.as_tensor(demand, dtype=dtype).unsqueeze(0),
            torch.as_tensor(feats, dtype=dtype).unsqueeze(0),
            torch.as_tensor(mask, dtype=torch.bool).unsqueeze(0),
        )
    return h[0].numpy(), alpha[0].numpy()
