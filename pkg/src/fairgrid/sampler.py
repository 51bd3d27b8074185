"""Reverse-process generation and layout decoding.

Two integrators over the noise-prediction parametrization (score =
-eps_hat / sigma_t): a third-order exponential-integrator ODE solver on a
uniform half-logSNR grid, and an ancestral Euler-Maruyama reference sampler
on a uniform time grid. Residence slots can be held at their known values
during integration (inpainting) and are restored exactly before decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .citygrid import Dataset, WalkingGraph, residence_category_id
from .errors import ConfigError, SamplingError
from .sde import NoiseSchedule, make_condition_graph, symmetric_noise

DEFAULT_T_MIN = 1e-3


@dataclass
class SamplerConfig:
    """method "dpm3" counts third-order solver steps (3 model calls each);
    "euler-maruyama" counts plain SDE steps (1 call each)."""

    method: str = "dpm3"
    steps: int = 200
    clamp_residences: bool = True
    decode_threshold: float = 0.5
    t_min: float = DEFAULT_T_MIN

    def __post_init__(self):
        if self.method not in ("dpm3", "euler-maruyama"):
            raise ConfigError(f"unknown sampler method {self.method!r}")
        if self.steps < 10:
            raise ConfigError("need at least 10 sampler steps")
        if not (0.0 < self.decode_threshold < 1.0):
            raise ConfigError("decode_threshold must lie in (0, 1)")
        if not (0.0 < self.t_min < 1.0):
            raise ConfigError("t_min must lie in (0, 1)")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "steps": self.steps,
            "clamp_residences": self.clamp_residences,
            "decode_threshold": self.decode_threshold,
            "t_min": self.t_min,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SamplerConfig":
        return cls(**obj)


def _scalar(schedule: NoiseSchedule, t: float) -> tuple[float, float, float]:
    tt = torch.tensor(t, dtype=torch.float64)
    log_a = float(schedule.log_alpha(tt))
    alpha = float(torch.exp(torch.tensor(log_a)))
    sigma = float(np.sqrt(max(1.0 - alpha * alpha, 0.0)))
    return log_a, alpha, sigma


def dpm3_time_grid(schedule: NoiseSchedule, steps: int, t_min: float) -> list[float]:
    """Uniform half-logSNR grid from the usable horizon down to t_min."""
    t_start = schedule.t_max
    lam_start = schedule.log_snr_half(torch.tensor(t_start, dtype=torch.float64))
    lam_end = schedule.log_snr_half(torch.tensor(t_min, dtype=torch.float64))
    lams = torch.linspace(float(lam_start), float(lam_end), steps + 1, dtype=torch.float64)
    ts = schedule.inverse_log_snr_half(lams)
    ts[0] = min(t_start, float(ts[0]))
    ts[-1] = t_min
    return [float(v) for v in ts]


def dpm3_solve(
    eps_fn,
    state: list[torch.Tensor],
    schedule: NoiseSchedule,
    steps: int,
    t_min: float,
    callback=None,
) -> list[torch.Tensor]:
    """Integrate the probability-flow ODE with singlestep third-order updates.

    ``eps_fn(state, t) -> list of noise predictions``; ``callback(state, t)``
    runs after every outer step (used for inpainting). The classic r1=1/3,
    r2=2/3 update is applied to each tensor in the state with shared scalar
    coefficients.
    """
    r1, r2 = 1.0 / 3.0, 2.0 / 3.0
    ts = dpm3_time_grid(schedule, steps, t_min)
    lam = lambda t: float(schedule.log_snr_half(torch.tensor(t, dtype=torch.float64)))
    inv = lambda l: float(
        schedule.inverse_log_snr_half(torch.tensor(l, dtype=torch.float64))
    )
    for i in range(steps):
        s, t = ts[i], ts[i + 1]
        lam_s, lam_t = lam(s), lam(t)
        h = lam_t - lam_s
        s1, s2 = inv(lam_s + r1 * h), inv(lam_s + r2 * h)
        log_a_s, _, _ = _scalar(schedule, s)
        log_a_s1, _, sig_s1 = _scalar(schedule, s1)
        log_a_s2, _, sig_s2 = _scalar(schedule, s2)
        log_a_t, _, sig_t = _scalar(schedule, t)
        phi_11 = np.expm1(r1 * h)
        phi_12 = np.expm1(r2 * h)
        phi_1 = np.expm1(h)
        phi_22 = np.expm1(r2 * h) / (r2 * h) - 1.0
        phi_2 = np.expm1(h) / h - 1.0

        eps_s = eps_fn(state, s)
        u1 = [
            float(np.exp(log_a_s1 - log_a_s)) * x - sig_s1 * phi_11 * e
            for x, e in zip(state, eps_s)
        ]
        eps_s1 = eps_fn(u1, s1)
        u2 = [
            float(np.exp(log_a_s2 - log_a_s)) * x
            - sig_s2 * phi_12 * e
            - (r2 / r1) * sig_s2 * phi_22 * (e1 - e)
            for x, e, e1 in zip(state, eps_s, eps_s1)
        ]
        eps_s2 = eps_fn(u2, s2)
        state = [
            float(np.exp(log_a_t - log_a_s)) * x
            - sig_t * phi_1 * e
            - (1.0 / r2) * sig_t * phi_2 * (e2 - e)
            for x, e, e2 in zip(state, eps_s, eps_s2)
        ]
        for x in state:
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite state at solver step {i}")
        if callback is not None:
            state = callback(state, t)
    return state


def euler_maruyama_solve(
    eps_fn,
    state: list[torch.Tensor],
    schedule: NoiseSchedule,
    steps: int,
    t_min: float,
    draw_noise,
    callback=None,
) -> list[torch.Tensor]:
    """Discretize the reverse SDE from the usable horizon down to t_min.

    ``draw_noise(state) -> list of unit-variance noises`` shaped like the
    state (symmetrized for edge tensors by the caller).
    """
    t_start = schedule.usable_t_max
    dt = (t_start - t_min) / steps
    for i in range(steps):
        t = t_start - i * dt
        beta = float(schedule.beta(torch.tensor(t, dtype=torch.float64)))
        _, _, sigma = _scalar(schedule, t)
        eps = eps_fn(state, t)
        xi = draw_noise(state)
        state = [
            x + dt * (0.5 * beta * x - beta * e / sigma) + np.sqrt(beta * dt) * z
            for x, e, z in zip(state, eps, xi)
        ]
        for x in state:
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite state at sampler step {i}")
        if callback is not None:
            state = callback(state, t - dt)
    return state


@dataclass
class ResidenceTemplate:
    """Known entries held fixed for one region: node count, which slots are
    residences, their one-hot rows and the residence-residence adjacency.
    Clamped sampling fixes the residence count exactly: template slots stay
    residences and the remaining slots may not decode to the residence
    category."""

    n_nodes: int
    residence_mask: np.ndarray
    categories_onehot: np.ndarray
    adjacency: np.ndarray
    residence_category: int = 0
    positions: np.ndarray | None = None

    @classmethod
    def from_graph(cls, graph: WalkingGraph, categories) -> "ResidenceTemplate":
        res_id = residence_category_id(categories)
        n = graph.n_nodes
        cats = graph.node_categories()
        res_mask = cats == res_id
        return cls(
            n_nodes=n,
            residence_mask=res_mask,
            categories_onehot=graph.categories_onehot[:n].astype(np.float64),
            adjacency=graph.adjacency[:n, :n].astype(np.float64),
            residence_category=res_id,
            positions=None if graph.positions is None else graph.positions.copy(),
        )


def decode_graph(
    x: np.ndarray,
    a: np.ndarray,
    mask: np.ndarray,
    threshold: float = 0.5,
    n_max: int | None = None,
    positions: np.ndarray | None = None,
) -> WalkingGraph:
    """Discretize real-valued tensors into a valid layout.

    Node category: per-row argmax (ties to the lowest id). Edge present iff
    the symmetrized score (a_ij + a_ji)/2 strictly exceeds the threshold;
    the diagonal is forced off and masked entries dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n_max is None:
        n_max = mask.shape[0]
    idx = np.flatnonzero(mask)
    x_rows = np.asarray(x, dtype=np.float64)[idx]
    cats = x_rows.argmax(axis=1)
    k_cat = x_rows.shape[1]

    sym = 0.5 * (np.asarray(a, dtype=np.float64) + np.asarray(a, dtype=np.float64).T)
    sub = sym[np.ix_(idx, idx)]
    edges = (sub > threshold).astype(np.int8)
    np.fill_diagonal(edges, 0)

    onehot = np.zeros((n_max, k_cat), dtype=np.int8)
    onehot[np.arange(n), cats] = 1
    adjacency = np.zeros((n_max, n_max), dtype=np.int8)
    adjacency[:n, :n] = edges
    out_mask = np.zeros(n_max, dtype=bool)
    out_mask[:n] = True
    graph = WalkingGraph(
        categories_onehot=onehot,
        adjacency=adjacency,
        node_mask=out_mask,
        positions=positions,
    )
    graph.validate()
    return graph


def _layout_batch_tensors(
    templates: list[ResidenceTemplate], width: int, k_cat: int, dtype: torch.dtype
):
    """Per-batch clamp tensors: residence row mask, pair mask and the known
    clean values embedded at the batch width."""
    b = len(templates)
    res_rows = torch.zeros(b, width, dtype=torch.bool)
    x_known = torch.zeros(b, width, k_cat, dtype=dtype)
    a_known = torch.zeros(b, width, width, dtype=dtype)
    mask = torch.zeros(b, width, dtype=torch.bool)
    for i, tpl in enumerate(templates):
        n = tpl.n_nodes
        mask[i, :n] = True
        rm = torch.as_tensor(tpl.residence_mask, dtype=torch.bool)
        res_rows[i, :n] = rm
        x_full = torch.as_tensor(tpl.categories_onehot, dtype=dtype)
        x_known[i, :n][rm] = x_full[rm]
        a_full = torch.as_tensor(tpl.adjacency, dtype=dtype)
        pair = rm.unsqueeze(0) & rm.unsqueeze(1)
        block = torch.zeros(n, n, dtype=dtype)
        block[pair] = a_full[pair]
        a_known[i, :n, :n] = block
    res_pairs = res_rows.unsqueeze(1) & res_rows.unsqueeze(2)
    res_pairs &= ~torch.eye(width, dtype=torch.bool).unsqueeze(0)
    return mask, res_rows, res_pairs, x_known, a_known


def sample_layout_batch(
    model,
    schedule: NoiseSchedule,
    cond: torch.Tensor,
    cond_graph: torch.Tensor,
    templates: list[ResidenceTemplate],
    config: SamplerConfig,
    generators: list[torch.Generator],
    dtype: torch.dtype = torch.float64,
    out_n_max: int | None = None,
) -> list[WalkingGraph]:
    """Generate one layout per template, clamping residences if configured.

    Each region consumes noise from its own generator, so outputs depend only
    on (checkpoint, per-region seed, config).
    """
    b = len(templates)
    width = cond.shape[1]
    k_cat = model.config.k_cat
    mask, res_rows, res_pairs, x_known, a_known = _layout_batch_tensors(
        templates, width, k_cat, dtype
    )
    mask_f = mask.to(dtype)
    pair = mask_f.unsqueeze(1) * mask_f.unsqueeze(2)
    pair = pair * (1.0 - torch.eye(width, dtype=dtype))

    def draw(shape_x: bool) -> torch.Tensor:
        outs = []
        for i in range(b):
            if shape_x:
                outs.append(torch.randn((width, k_cat), generator=generators[i], dtype=dtype))
            else:
                outs.append(symmetric_noise((1, width, width), generators[i], dtype)[0])
        stacked = torch.stack(outs)
        if shape_x:
            return stacked * mask_f.unsqueeze(-1)
        return stacked * pair

    def clamp(state: list[torch.Tensor], t: float) -> list[torch.Tensor]:
        if not config.clamp_residences:
            return state
        x, a = state
        tt = torch.tensor(t, dtype=torch.float64)
        alpha, sigma = schedule.alpha_sigma(tt)
        alpha, sigma = float(alpha), float(sigma)
        x_t_known = alpha * x_known + sigma * draw(True)
        a_t_known = alpha * a_known + sigma * draw(False)
        x = torch.where(res_rows.unsqueeze(-1), x_t_known, x)
        a = torch.where(res_pairs, a_t_known, a)
        return [x, a]

    def eps_fn(state: list[torch.Tensor], t: float):
        x, a = state
        t_b = torch.full((b,), t, dtype=dtype)
        with torch.no_grad():
            ex, ea = model(x, a, cond, cond_graph, t_b, mask)
        return [ex, ea]

    x = draw(True)
    a = draw(False)
    state = clamp([x, a], schedule.t_max) if config.clamp_residences else [x, a]

    if config.method == "dpm3":
        state = dpm3_solve(eps_fn, state, schedule, config.steps, config.t_min, clamp)
    else:
        state = euler_maruyama_solve(
            eps_fn,
            state,
            schedule,
            config.steps,
            config.t_min,
            lambda st: [draw(True), draw(False)],
            clamp,
        )

    x, a = state
    if config.clamp_residences:
        x = torch.where(res_rows.unsqueeze(-1), x_known, x)
        a = torch.where(res_pairs, a_known, a)
        # Non-template slots may not decode to the residence category: the
        # template fixes the residence count for the region.
        for i, tpl in enumerate(templates):
            free = mask[i] & ~res_rows[i]
            if free.any():
                x[i, free, tpl.residence_category] = x[i, free].min() - 1.0

    graphs = []
    for i in range(b):
        graphs.append(
            decode_graph(
                x[i].numpy(),
                a[i].numpy(),
                mask[i].numpy(),
                threshold=config.decode_threshold,
                n_max=out_n_max,
                positions=None,
            )
        )
    return graphs


def sample_layout(
    model,
    schedule: NoiseSchedule,
    cond: torch.Tensor,
    cond_graph: torch.Tensor,
    template: ResidenceTemplate,
    config: SamplerConfig,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float64,
) -> WalkingGraph:
    """Single-region convenience wrapper around sample_layout_batch."""
    return sample_layout_batch(
        model,
        schedule,
        cond.unsqueeze(0),
        cond_graph.unsqueeze(0),
        [template],
        config,
        [generator],
        dtype,
    )[0]


@dataclass
class GeneratedLayout:
    region_id: int
    seed: int
    graph: WalkingGraph


def region_seed(base_seed: int, region_id: int) -> int:
    return base_seed * 1_000_003 + region_id


def generate_for_dataset(
    model,
    schedule: NoiseSchedule,
    dataset: Dataset,
    cond_embeddings: torch.Tensor,
    config: SamplerConfig,
    base_seed: int,
    batch_size: int = 16,
    dtype: torch.dtype = torch.float64,
) -> list[GeneratedLayout]:
    """One generated layout per dataset region with per-region seeds."""
    if cond_embeddings.shape[0] != len(dataset):
        raise ConfigError(
            f"{cond_embeddings.shape[0]} condition embeddings for {len(dataset)} regions"
        )
    width = max(g.n_nodes for g in dataset.graphs())
    outs: list[GeneratedLayout] = []
    records = dataset.records
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        templates = [
            ResidenceTemplate.from_graph(g, dataset.categories) for _, g in chunk
        ]
        cond = cond_embeddings[start : start + len(chunk), :width].to(dtype)
        cond_graph = torch.stack(
            [
                torch.as_tensor(
                    make_condition_graph(g, dataset.categories)[:width, :width], dtype=dtype
                )
                for _, g in chunk
            ]
        )
        seeds = [region_seed(base_seed, r.region_id) for r, _ in chunk]
        gens = [torch.Generator().manual_seed(s) for s in seeds]
        graphs = sample_layout_batch(
            model, schedule, cond, cond_graph, templates, config, gens, dtype,
            out_n_max=dataset.n_max,
        )
        for (record, _), seed, graph in zip(chunk, seeds, graphs):
            outs.append(GeneratedLayout(region_id=record.region_id, seed=seed, graph=graph))
    return outs
