"""Conditional graph noise-prediction network.

Pipeline per forward pass: augment the noisy tensors with structural
statistics (random-walk return probabilities, truncated shortest paths,
degree, closeness), project node/edge features to the hidden width, add the
time embedding and the projected per-region condition embedding, run a stack
of residual hybrid layers (edge-modulated global attention in parallel with
local message passing on the binarized noisy graph), aggregate skip
connections from every layer, and emit node and edge noise through separate
heads. The edge output is symmetrized with a zero diagonal; masked entries
are exactly zero everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, InputError

TIME_SCALE = 1000.0  # stretches t in [0,1] before the sinusoid


@dataclass
class DenoiserConfig:
    layers: int = 3
    d_hidden: int = 128
    heads: int = 4
    m_walk: int = 20
    time_embed_dim: int = 128
    dropout: float = 0.0
    k_cat: int = 14
    cond_dim: int = 64

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.d_hidden % self.heads != 0:
            raise ConfigError("d_hidden must be divisible by heads")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError("time_embed_dim must be even")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def node_in_dim(self) -> int:
        return self.k_cat + self.m_walk + 2

    @property
    def edge_in_dim(self) -> int:
        return self.m_walk + 4

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserConfig":
        return cls(**obj)


def sinusoidal_time_encoding(t: torch.Tensor, dim: int, scale: float = TIME_SCALE) -> torch.Tensor:
    """Sin/cos positional encoding of a normalized time in [0, 1], (B, dim)."""
    if dim % 2 != 0:
        raise InputError("encoding dimension must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / (half - 1)
    )
    angles = t.reshape(-1, 1) * scale * freqs.unsqueeze(0)
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal encoding followed by two fully connected layers."""

    def __init__(self, enc_dim: int, d_hidden: int):
        super().__init__()
        self.enc_dim = enc_dim
        self.fc1 = nn.Linear(enc_dim, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_hidden)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        enc = sinusoidal_time_encoding(t, self.enc_dim).to(self.fc1.weight.dtype)
        return self.fc2(torch.nn.functional.silu(self.fc1(enc)))


def augment_graph(
    x_t: torch.Tensor,
    a_t: torch.Tensor,
    mask: torch.Tensor,
    cond_graph: torch.Tensor,
    m_walk: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Structural feature augmentation of a noisy batch.

    Binarizes A_t at 0.5 into a working adjacency, then builds
      node features: X_t ++ m-step random-walk return probabilities ++
                     degree/n ++ closeness centrality,
      edge features: noisy edge value ++ one-hot truncated shortest-path
                     distance (self=0, clipped at m_walk, disconnected bucket
                     m_walk+1) ++ condition-graph bit.
    Returns (node_aug, edge_aug, a_hat); every masked entry is zero.
    """
    b, n = mask.shape
    dtype = x_t.dtype
    mask_f = mask.to(dtype)
    eye = torch.eye(n, dtype=dtype)
    pair_full = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)
    pair = pair_full * (1.0 - eye)

    a_hat = (a_t > 0.5).to(dtype) * pair

    # Row-normalized transition matrix; isolated (but real) nodes self-loop.
    deg = a_hat.sum(dim=-1)
    isolated = (deg == 0) & mask
    trans = a_hat / deg.clamp(min=1.0).unsqueeze(-1)
    trans = trans + torch.diag_embed(isolated.to(dtype))

    diags = []
    walk = trans
    for step in range(m_walk):
        if step > 0:
            walk = walk @ trans
        diags.append(torch.diagonal(walk, dim1=1, dim2=2))
    rw = torch.stack(diags, dim=-1) * mask_f.unsqueeze(-1)

    n_nodes = mask_f.sum(dim=-1).clamp(min=1.0)
    deg_feat = deg / n_nodes.unsqueeze(-1)

    # BFS by boolean matrix powers; distances fill in hop by hop.
    pair_bool = pair > 0
    reached = torch.diag_embed(mask).bool()
    dist = torch.where(reached, 0, -1)
    hops = 0
    while True:
        hops += 1
        nxt = reached | (reached.to(dtype) @ a_hat > 0)
        newly = nxt & ~reached & pair_bool
        if not newly.any() or hops > n:
            break
        dist = torch.where(newly, hops, dist)
        reached = nxt

    connected = dist > 0
    bucket = torch.where(connected, dist.clamp(max=m_walk), 0)
    bucket = torch.where(pair_bool & ~connected, m_walk + 1, bucket)
    sp_onehot = torch.nn.functional.one_hot(bucket.long(), m_walk + 2).to(dtype)
    sp_onehot = sp_onehot * pair_full.unsqueeze(-1)

    # Closeness centrality with the reachable-fraction correction.
    reach_other = connected
    r_count = reach_other.sum(dim=-1).to(dtype)
    sum_d = (dist.clamp(min=0).to(dtype) * reach_other.to(dtype)).sum(dim=-1)
    denom_n = (n_nodes - 1.0).clamp(min=1.0).unsqueeze(-1)
    closeness = torch.where(
        r_count > 0,
        (r_count / denom_n) * (r_count / sum_d.clamp(min=1.0)),
        torch.zeros_like(sum_d),
    )

    node_aug = torch.cat(
        [x_t, rw, deg_feat.unsqueeze(-1), closeness.unsqueeze(-1)], dim=-1
    ) * mask_f.unsqueeze(-1)
    # Diagonal entries stay active so self-edges carry a learned feature
    # (the distance-0 bucket); attention sums over j include the self term.
    edge_aug = torch.cat(
        [a_t.unsqueeze(-1), sp_onehot, cond_graph.to(dtype).unsqueeze(-1)], dim=-1
    ) * pair_full.unsqueeze(-1)
    return node_aug, edge_aug, a_hat


class GraphTransformerBlock(nn.Module):
    """Global self-attention with tanh edge gates on queries and values.

    Per head, the attention logit for (i, j) is the inner product of
    tanh(W0 E_ij) * Q_i with K_j, scaled by sqrt(d_k); messages are
    tanh(W1 E_ij) * V_j. Heads are concatenated, then residual + layer norm.
    """

    def __init__(self, d_hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_k = d_hidden // heads
        self.w_q = nn.Linear(d_hidden, d_hidden, bias=False)
        self.w_k = nn.Linear(d_hidden, d_hidden, bias=False)
        self.w_v = nn.Linear(d_hidden, d_hidden, bias=False)
        self.w_gate_q = nn.Linear(d_hidden, d_hidden)
        self.w_gate_v = nn.Linear(d_hidden, d_hidden)
        self.norm = nn.LayerNorm(d_hidden)

    def forward(self, h: torch.Tensor, e: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = h.shape
        hd = (b, n, self.heads, self.d_k)
        q = self.w_q(h).view(hd)
        k = self.w_k(h).view(hd)
        v = self.w_v(h).view(hd)
        gate_q = torch.tanh(self.w_gate_q(e)).view(b, n, n, self.heads, self.d_k)
        gate_v = torch.tanh(self.w_gate_v(e)).view(b, n, n, self.heads, self.d_k)

        logits = torch.einsum("bijhk,bihk,bjhk->bijh", gate_q, q, k) / math.sqrt(self.d_k)
        neg = torch.finfo(h.dtype).max / 4
        logits = logits.masked_fill(~mask.view(b, 1, n, 1), -neg)
        attn = torch.softmax(logits, dim=2)

        msg = torch.einsum("bijh,bijhk,bjhk->bihk", attn, gate_v, v).reshape(b, n, d)
        out = self.norm(h + msg)
        return out * mask.unsqueeze(-1).to(h.dtype)


class FeedForward(nn.Module):
    """Two-layer MLP followed by a normalization layer."""

    def __init__(self, d_hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_hidden, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_hidden)
        self.norm = nn.LayerNorm(d_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.fc2(torch.nn.functional.silu(self.fc1(x))))


class MessagePassingBlock(nn.Module):
    """Local aggregation on the binarized noisy graph.

    Symmetrically normalized graph convolution (with self-loops) produces
    pooled node states; node outputs pass through one feed-forward stack and
    edge outputs are built from symmetric sums of pooled endpoint states.
    """

    def __init__(self, d_hidden: int):
        super().__init__()
        self.w_g = nn.Linear(d_hidden, d_hidden)
        self.ffn_node = FeedForward(d_hidden)
        self.ffn_edge = FeedForward(d_hidden)

    def forward(
        self, h: torch.Tensor, a_hat: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        mask_f = mask.to(h.dtype)
        a_tilde = a_hat + torch.diag_embed(mask_f)
        deg = a_tilde.sum(dim=-1).clamp(min=1.0)
        inv_sqrt = deg.rsqrt() * mask_f
        norm_adj = a_tilde * inv_sqrt.unsqueeze(1) * inv_sqrt.unsqueeze(2)
        pooled = norm_adj @ self.w_g(h)
        node_out = self.ffn_node(pooled) * mask_f.unsqueeze(-1)
        pair = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)
        edge_out = self.ffn_edge(pooled.unsqueeze(2) + pooled.unsqueeze(1))
        edge_out = edge_out * pair.unsqueeze(-1)
        return node_out, edge_out


class ResidualHybridLayer(nn.Module):
    """One denoiser layer: attention and message passing in parallel, node
    outputs summed through a shared feed-forward, residual + norm on both
    node and edge streams. Time embedding is re-injected at the input."""

    def __init__(self, d_hidden: int, heads: int, dropout: float):
        super().__init__()
        self.time_proj = nn.Linear(d_hidden, d_hidden)
        self.gtb = GraphTransformerBlock(d_hidden, heads)
        self.mpb = MessagePassingBlock(d_hidden)
        self.fuse1 = nn.Linear(d_hidden, d_hidden)
        self.fuse2 = nn.Linear(d_hidden, d_hidden)
        self.norm_node = nn.LayerNorm(d_hidden)
        self.norm_edge = nn.LayerNorm(d_hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, e, a_hat, t_emb, mask):
        mask_f = mask.to(h.dtype)
        pair = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)
        h = h + self.time_proj(t_emb).unsqueeze(1) * mask_f.unsqueeze(-1)
        h_attn = self.gtb(h, e, mask)
        h_local, e_local = self.mpb(h, a_hat, mask)
        fused = self.fuse2(torch.nn.functional.silu(self.fuse1(h_attn + h_local)))
        h_out = self.norm_node(h + self.drop(fused)) * mask_f.unsqueeze(-1)
        e_out = self.norm_edge(e + self.drop(e_local)) * pair.unsqueeze(-1)
        return h_out, e_out


class OutputHead(nn.Module):
    """An MLP followed by three 1x1-convolution blocks (per-entry linears)."""

    def __init__(self, d_hidden: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Linear(d_hidden, d_hidden)
        self.conv1 = nn.Linear(d_hidden, d_hidden)
        self.conv2 = nn.Linear(d_hidden, d_hidden)
        self.conv3 = nn.Linear(d_hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        act = torch.nn.functional.silu
        x = act(self.mlp(x))
        x = act(self.conv1(x))
        x = act(self.conv2(x))
        return self.conv3(x)


class Denoiser(nn.Module):
    """Predicts the injected node and edge noise of a perturbed graph batch."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.d_hidden
        self.node_in = nn.Linear(config.node_in_dim, d)
        self.edge_in = nn.Linear(config.edge_in_dim, d)
        self.cond_in = nn.Linear(config.cond_dim, d)
        self.time_embed = TimeEmbedding(config.time_embed_dim, d)
        self.time_in = nn.Linear(d, d)
        self.layers = nn.ModuleList(
            [ResidualHybridLayer(d, config.heads, config.dropout) for _ in range(config.layers)]
        )
        self.node_head = OutputHead(d, config.k_cat)
        self.edge_head = OutputHead(d, 1)

    def forward(
        self,
        x_t: torch.Tensor,
        a_t: torch.Tensor,
        cond: torch.Tensor,
        cond_graph: torch.Tensor,
        t: torch.Tensor,
        mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, k = x_t.shape
        if k != self.config.k_cat:
            raise ConfigError(f"expected {self.config.k_cat} categories, got {k}")
        if cond.shape[-1] != self.config.cond_dim:
            raise ConfigError(
                f"condition width {cond.shape[-1]} != configured {self.config.cond_dim}"
            )
        mask_f = mask.to(x_t.dtype)
        pair = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)

        node_aug, edge_aug, a_hat = augment_graph(
            x_t, a_t, mask, cond_graph, self.config.m_walk
        )
        t_emb = self.time_embed(torch.as_tensor(t, dtype=x_t.dtype).reshape(b))
        h = self.node_in(node_aug)
        h = h + self.time_in(t_emb).unsqueeze(1) + self.cond_in(cond)
        h = h * mask_f.unsqueeze(-1)
        e = self.edge_in(edge_aug) * pair.unsqueeze(-1)

        h_skip, e_skip = h, e
        for layer in self.layers:
            h, e = layer(h, e, a_hat, t_emb, mask)
            h_skip = h_skip + h
            e_skip = e_skip + e

        eps_x = self.node_head(h_skip) * mask_f.unsqueeze(-1)
        raw_edge = self.edge_head(e_skip).squeeze(-1)
        eps_a = 0.5 * (raw_edge + raw_edge.transpose(1, 2))
        eps_a = eps_a * pair * (1.0 - torch.eye(n, dtype=x_t.dtype))
        return eps_x, eps_a

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
