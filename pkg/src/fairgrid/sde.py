"""Variance-preserving forward diffusion for graph node/edge tensors.

The forward kernel is q(G_t | G_0) = N(alpha_t G_0, sigma_t^2 I) applied
independently to node features and to the upper triangle of the adjacency
(then symmetrized). Schedules keep alpha_t^2 + sigma_t^2 = 1. Training uses
plain noise matching: the denoiser predicts the injected noise and the loss
is the squared error summed over active entries, with the edge term counted
once per unordered pair and doubled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .citygrid import WalkingGraph, residence_category_id
from .errors import ConfigError, InputError, TrainingError

# Standard clipping for the cosine schedule: the noise rate is capped at 999,
# which caps usable time at ~0.9946; the schedule is flat beyond that.
COSINE_BETA_CLIP = 999.0


@dataclass
class NoiseSchedule:
    """Time-dependent (alpha_t, sigma_t, beta_t) on t in [0, 1].

    kind "linear-vp": beta(t) = beta_min + t (beta_max - beta_min).
    kind "cosine": the squared-cosine signal schedule (s = 0.008) with the
    standard clip on beta. ``steps`` is the reference discretization recorded
    in checkpoints; the continuous functions below do not depend on it.
    """

    kind: str = "cosine"
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_max: float = 1.0
    steps: int = 200
    cosine_s: float = 0.008

    def __post_init__(self):
        if self.kind not in ("linear-vp", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "linear-vp" and not (0 < self.beta_min <= self.beta_max):
            raise ConfigError("need 0 < beta_min <= beta_max")
        s = self.cosine_s
        self._cos_log_alpha0 = math.log(math.cos(s / (1 + s) * math.pi / 2))
        self._cos_t_clip = (
            math.atan(COSINE_BETA_CLIP * (1 + s) / math.pi) * 2 * (1 + s) / math.pi - s
        )

    @property
    def usable_t_max(self) -> float:
        """Largest time with a finite noise rate (the clip point for cosine)."""
        if self.kind == "cosine":
            return min(self.t_max, self._cos_t_clip)
        return self.t_max

    def _check_domain(self, t: torch.Tensor) -> None:
        if torch.any(t < 0) or torch.any(t > self.t_max):
            raise InputError(f"time must lie in [0, {self.t_max}]")

    def log_alpha(self, t: torch.Tensor) -> torch.Tensor:
        self._check_domain(t)
        if self.kind == "linear-vp":
            return -0.25 * t**2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
        s = self.cosine_s
        t_eff = torch.clamp(t, max=self._cos_t_clip)
        return torch.log(torch.cos((t_eff + s) / (1 + s) * math.pi / 2)) - self._cos_log_alpha0

    def alpha_sigma(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        log_a = self.log_alpha(t)
        alpha = torch.exp(log_a)
        sigma = torch.sqrt((1.0 - torch.exp(2.0 * log_a)).clamp(min=0.0))
        return alpha, sigma

    def beta(self, t: torch.Tensor) -> torch.Tensor:
        self._check_domain(t)
        if self.kind == "linear-vp":
            return self.beta_min + t * (self.beta_max - self.beta_min)
        s = self.cosine_s
        t_eff = torch.clamp(t, max=self._cos_t_clip)
        return math.pi / (1 + s) * torch.tan((t_eff + s) / (1 + s) * math.pi / 2)

    def log_snr_half(self, t: torch.Tensor) -> torch.Tensor:
        """lambda(t) = log(alpha_t / sigma_t)."""
        log_a = self.log_alpha(t)
        log_sigma = 0.5 * torch.log((1.0 - torch.exp(2.0 * log_a)).clamp(min=1e-300))
        return log_a - log_sigma

    def inverse_log_snr_half(self, lam: torch.Tensor) -> torch.Tensor:
        """Inverse of log_snr_half (clamped to the usable time range)."""
        if self.kind == "linear-vp":
            tmp = (
                2.0
                * (self.beta_max - self.beta_min)
                * torch.logaddexp(-2.0 * lam, torch.zeros_like(lam))
            )
            delta = self.beta_min**2 + tmp
            return tmp / (torch.sqrt(delta) + self.beta_min) / (self.beta_max - self.beta_min)
        s = self.cosine_s
        log_a = -0.5 * torch.logaddexp(-2.0 * lam, torch.zeros_like(lam))
        inner = torch.exp(log_a + self._cos_log_alpha0).clamp(max=1.0)
        t = torch.arccos(inner) * 2 * (1 + s) / math.pi - s
        return t.clamp(min=0.0, max=self._cos_t_clip)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        return cls(**obj)


def marginal_params(schedule: NoiseSchedule, t) -> tuple:
    """(alpha_t, sigma_t) for a float or array-like t; floats in, floats out."""
    if isinstance(t, torch.Tensor):
        return schedule.alpha_sigma(t)
    arr = torch.as_tensor(np.asarray(t, dtype=np.float64))
    alpha, sigma = schedule.alpha_sigma(arr)
    if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
        return float(alpha), float(sigma)
    return alpha.numpy(), sigma.numpy()


def symmetric_noise(
    shape: tuple[int, int, int],
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """(B, N, N) noise drawn i.i.d. on the strict upper triangle, mirrored
    below, zero diagonal."""
    b, n, _ = shape
    iu = torch.triu_indices(n, n, offset=1)
    flat = torch.randn((b, iu.shape[1]), generator=generator, dtype=dtype)
    out = torch.zeros(shape, dtype=dtype)
    out[:, iu[0], iu[1]] = flat
    out = out + out.transpose(1, 2)
    return out


@dataclass
class NoisySample:
    """A perturbed graph batch at times ``t`` plus the injected noises."""

    x_t: torch.Tensor
    a_t: torch.Tensor
    t: torch.Tensor
    eps_x: torch.Tensor
    eps_a: torch.Tensor
    mask: torch.Tensor


def perturb(
    x0: torch.Tensor,
    a0: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    mask: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> NoisySample:
    """Sample G_t from the forward kernel.

    Accepts a single graph (2-D tensors, scalar t) or a batch (3-D tensors,
    per-sample t). Node noise is drawn first, then edge noise on the strict
    upper triangle. Masked entries and the diagonal stay exactly zero.
    """
    single = x0.dim() == 2
    if single:
        x0, a0 = x0.unsqueeze(0), a0.unsqueeze(0)
        if mask is not None:
            mask = mask.unsqueeze(0)
    b, n, _ = x0.shape
    t = torch.as_tensor(t, dtype=x0.dtype)
    if t.dim() == 0:
        t = t.repeat(b)
    if torch.any(t <= 0) or torch.any(t > schedule.t_max):
        raise InputError("perturbation time must lie in (0, t_max]")
    if mask is None:
        mask = torch.ones(b, n, dtype=torch.bool)
    mask_f = mask.to(x0.dtype)
    pair = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)
    pair = pair * (1.0 - torch.eye(n, dtype=x0.dtype))

    alpha, sigma = schedule.alpha_sigma(t)
    alpha = alpha.view(b, 1, 1)
    sigma = sigma.view(b, 1, 1)

    eps_x = torch.randn(x0.shape, generator=generator, dtype=x0.dtype) * mask_f.unsqueeze(-1)
    eps_a = symmetric_noise((b, n, n), generator=generator, dtype=x0.dtype) * pair
    x_t = (alpha * x0 + sigma * eps_x) * mask_f.unsqueeze(-1)
    a_t = (alpha * a0 + sigma * eps_a) * pair

    if single:
        return NoisySample(x_t[0], a_t[0], t[0], eps_x[0], eps_a[0], mask[0])
    return NoisySample(x_t, a_t, t, eps_x, eps_a, mask)


def perturb_graph(
    graph: WalkingGraph,
    t: float,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float64,
) -> NoisySample:
    """Convenience wrapper: perturb one WalkingGraph's dense tensors."""
    x0 = torch.as_tensor(graph.categories_onehot, dtype=dtype)
    a0 = torch.as_tensor(graph.adjacency, dtype=dtype)
    mask = torch.as_tensor(graph.node_mask, dtype=torch.bool)
    return perturb(x0, a0, t, schedule, mask=mask, generator=generator)


def make_condition_graph(graph: WalkingGraph, categories) -> np.ndarray:
    """Edges of the walking graph that touch at least one residence node.

    This is the discrete structure handed to the denoiser as a condition: it
    marks which facility slots sit within a 15-minute walk of housing.
    """
    res_id = residence_category_id(categories)
    res = graph.categories_onehot[:, res_id].astype(bool)
    incident = res[:, None] | res[None, :]
    return (graph.adjacency.astype(bool) & incident).astype(np.int8)


def active_entry_count(mask: torch.Tensor, k_cat: int) -> torch.Tensor:
    """Entries contributing to the loss per sample: n*k node entries plus
    n*(n-1) ordered off-diagonal pairs."""
    n = mask.sum(dim=-1).to(torch.float64)
    return n * k_cat + n * (n - 1)


def score_matching_loss(
    model,
    x0: torch.Tensor,
    a0: torch.Tensor,
    cond: torch.Tensor,
    cond_graph: torch.Tensor,
    mask: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Noise-matching objective on a padded batch.

    Samples t uniformly in (0, 1] per graph, perturbs, and scores the model's
    noise prediction. Per sample: squared node error over unmasked rows plus
    twice the squared upper-triangle edge error; mean over the batch. The
    weighting over t is constant. ``t``/``noise`` can be injected for tests.
    """
    b, n, _ = x0.shape
    if t is None:
        t = 1.0 - torch.rand(b, generator=generator, dtype=x0.dtype)
    mask_f = mask.to(x0.dtype)
    pair = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)
    pair = pair * (1.0 - torch.eye(n, dtype=x0.dtype))

    if noise is None:
        sample = perturb(x0, a0, t, schedule, mask=mask, generator=generator)
    else:
        eps_x, eps_a = noise
        alpha, sigma = schedule.alpha_sigma(t)
        alpha, sigma = alpha.view(b, 1, 1), sigma.view(b, 1, 1)
        x_t = (alpha * x0 + sigma * eps_x) * mask_f.unsqueeze(-1)
        a_t = (alpha * a0 + sigma * eps_a) * pair
        sample = NoisySample(x_t, a_t, t, eps_x, eps_a, mask)

    eps_hat_x, eps_hat_a = model(sample.x_t, sample.a_t, cond, cond_graph, t, mask)

    diff_x = (sample.eps_x - eps_hat_x) * mask_f.unsqueeze(-1)
    node_term = diff_x.pow(2).sum(dim=(1, 2))
    upper = torch.triu(torch.ones(n, n, dtype=x0.dtype), diagonal=1)
    diff_a = (sample.eps_a - eps_hat_a) * pair
    edge_term = 2.0 * (diff_a.pow(2) * upper).sum(dim=(1, 2))
    loss = (node_term + edge_term).mean()
    if not torch.isfinite(loss):
        raise TrainingError("score-matching loss is not finite")
    return loss
