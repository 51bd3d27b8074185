"""Noise schedules, the forward kernel and the noise-matching objective."""

import math

import numpy as np
import pytest
import torch

import fairgrid.citygrid as cg
from fairgrid.errors import InputError
from fairgrid.sde import (
    NoiseSchedule,
    active_entry_count,
    make_condition_graph,
    marginal_params,
    perturb,
    perturb_graph,
    score_matching_loss,
    symmetric_noise,
)

CATEGORIES = cg.default_categories()


class TestMarginalParams:
    def test_no_noise_at_start(self):
        for kind in ("linear-vp", "cosine"):
            alpha, sigma = marginal_params(NoiseSchedule(kind=kind), 0.0)
            assert alpha == 1.0
            assert sigma == 0.0

    def test_linear_vp_closed_form_at_one(self):
        alpha, sigma = marginal_params(NoiseSchedule(kind="linear-vp"), 1.0)
        # integral of the rate over [0,1]: 0.1 + (20 - 0.1)/2 = 10.05
        assert math.isclose(alpha, math.exp(-0.5 * 10.05), rel_tol=1e-12)
        assert math.isclose(sigma, math.sqrt(1.0 - alpha**2), rel_tol=1e-12)
        assert alpha < 7e-3 and sigma > 0.9999

    def test_variance_preserving_identity(self):
        gen = torch.Generator().manual_seed(1)
        t = torch.rand(1000, generator=gen, dtype=torch.float64)
        for kind in ("linear-vp", "cosine"):
            alpha, sigma = NoiseSchedule(kind=kind).alpha_sigma(t)
            assert float((alpha**2 + sigma**2 - 1.0).abs().max()) < 1e-9

    def test_alpha_monotone_decreasing(self):
        t = torch.linspace(0.0, 0.99, 200, dtype=torch.float64)
        for kind in ("linear-vp", "cosine"):
            alpha, sigma = NoiseSchedule(kind=kind).alpha_sigma(t)
            assert (alpha[1:] < alpha[:-1]).all()
            assert (sigma[1:] > sigma[:-1]).all()

    def test_domain_error(self):
        sch = NoiseSchedule()
        with pytest.raises(InputError):
            marginal_params(sch, -0.1)
        with pytest.raises(InputError):
            marginal_params(sch, 1.1)


def small_graph_tensors(b=2, n=6, k=14, seed=0):
    gen = torch.Generator().manual_seed(seed)
    mask = torch.ones(b, n, dtype=torch.bool)
    x0 = torch.zeros(b, n, k, dtype=torch.float64)
    for i in range(b):
        x0[i, torch.arange(n), torch.randint(0, k, (n,), generator=gen)] = 1.0
    a0 = (torch.rand((b, n, n), generator=gen) < 0.5).double()
    a0 = torch.triu(a0, 1)
    a0 = a0 + a0.transpose(1, 2)
    return x0, a0, mask


class TestPerturb:
    def test_identity_limit_near_zero(self):
        sch = NoiseSchedule(kind="linear-vp")
        x0, a0, mask = small_graph_tensors()
        gen = torch.Generator().manual_seed(4)
        sample = perturb(x0, a0, 1e-9, sch, mask=mask, generator=gen)
        assert float((sample.x_t - x0).abs().max()) < 1e-4
        assert float((sample.a_t - a0).abs().max()) < 1e-4

    def test_zero_noise_deterministic_branch(self):
        sch = NoiseSchedule(kind="linear-vp")
        x0, a0, mask = small_graph_tensors()
        t = torch.tensor([0.5, 0.5], dtype=torch.float64)
        alpha, _ = sch.alpha_sigma(t)
        gen = torch.Generator().manual_seed(4)
        sample = perturb(x0, a0, t, sch, mask=mask, generator=gen)
        reconstructed = sample.x_t - (sample.x_t - alpha.view(-1, 1, 1) * x0)
        assert torch.allclose(reconstructed, alpha.view(-1, 1, 1) * x0)
        # removing the drawn noise leaves exactly the scaled signal
        _, sigma = sch.alpha_sigma(t)
        assert torch.allclose(
            sample.x_t - sigma.view(-1, 1, 1) * sample.eps_x, alpha.view(-1, 1, 1) * x0
        )

    def test_monte_carlo_moments(self):
        sch = NoiseSchedule(kind="linear-vp")
        n_draws = 10_000
        x0 = torch.ones(n_draws, 2, 3, dtype=torch.float64)
        a0 = torch.zeros(n_draws, 2, 2, dtype=torch.float64)
        a0[:, 0, 1] = a0[:, 1, 0] = 1.0
        gen = torch.Generator().manual_seed(7)
        t = torch.full((n_draws,), 0.5, dtype=torch.float64)
        sample = perturb(x0, a0, t, sch, generator=gen)
        alpha, sigma = marginal_params(sch, 0.5)
        se_mean = sigma / math.sqrt(n_draws)
        mean = float(sample.x_t.mean())
        assert abs(mean - alpha) < 3 * se_mean
        var = float(sample.x_t.var())
        se_var = sigma**2 * math.sqrt(2.0 / n_draws)
        assert abs(var - sigma**2) < 3 * se_var

    def test_edge_tensor_symmetric_zero_diagonal(self):
        sch = NoiseSchedule(kind="cosine")
        x0, a0, mask = small_graph_tensors(b=3, n=8)
        gen = torch.Generator().manual_seed(9)
        for t in (0.1, 0.5, 0.99):
            sample = perturb(x0, a0, t, sch, mask=mask, generator=gen)
            assert torch.equal(sample.a_t, sample.a_t.transpose(1, 2))
            assert float(sample.a_t.diagonal(dim1=1, dim2=2).abs().max()) == 0.0
            assert torch.equal(sample.eps_a, sample.eps_a.transpose(1, 2))

    def test_masked_entries_zero(self):
        sch = NoiseSchedule()
        x0, a0, _ = small_graph_tensors(b=1, n=6)
        mask = torch.tensor([[True, True, True, False, False, False]])
        x0 = x0 * mask.unsqueeze(-1).double()
        a0 = a0 * (mask.unsqueeze(1) & mask.unsqueeze(2)).double()
        gen = torch.Generator().manual_seed(2)
        sample = perturb(x0, a0, 0.7, sch, mask=mask, generator=gen)
        assert float(sample.x_t[0, 3:].abs().max()) == 0.0
        assert float(sample.a_t[0, 3:, :].abs().max()) == 0.0
        assert float(sample.a_t[0, :, 3:].abs().max()) == 0.0

    def test_graph_wrapper(self, small_dataset):
        graph = small_dataset.records[0][1]
        gen = torch.Generator().manual_seed(3)
        sample = perturb_graph(graph, 0.5, NoiseSchedule(), generator=gen)
        assert sample.x_t.shape == (graph.n_max, graph.k_cat)
        assert torch.equal(sample.a_t, sample.a_t.T)

    def test_time_domain(self):
        sch = NoiseSchedule()
        x0, a0, mask = small_graph_tensors()
        with pytest.raises(InputError):
            perturb(x0, a0, 0.0, sch, mask=mask)


class TestConditionGraph:
    def test_no_residences_all_zero(self):
        onehot = np.zeros((4, 14), dtype=np.int8)
        onehot[:3, 2] = 1
        adj = np.zeros((4, 4), dtype=np.int8)
        adj[0, 1] = adj[1, 0] = 1
        mask = np.array([True, True, True, False])
        graph = cg.WalkingGraph(categories_onehot=onehot, adjacency=adj, node_mask=mask)
        assert make_condition_graph(graph, CATEGORIES).sum() == 0

    def test_star_around_residence(self):
        onehot = np.zeros((5, 14), dtype=np.int8)
        onehot[0, 0] = 1
        onehot[1:, 3] = 1
        adj = np.zeros((5, 5), dtype=np.int8)
        adj[0, 1:] = 1
        adj[1:, 0] = 1
        graph = cg.WalkingGraph(
            categories_onehot=onehot, adjacency=adj, node_mask=np.ones(5, dtype=bool)
        )
        assert np.array_equal(make_condition_graph(graph, CATEGORIES), adj)

    def test_matches_brute_force(self, small_dataset):
        for _, graph in small_dataset.records:
            cond = make_condition_graph(graph, CATEGORIES)
            cats = graph.node_categories()
            n = graph.n_nodes
            for i in range(n):
                for j in range(n):
                    expect = int(
                        graph.adjacency[i, j] == 1 and (cats[i] == 0 or cats[j] == 0)
                    )
                    assert cond[i, j] == expect
            assert np.array_equal(cond, cond.T)


class _OracleModel:
    """Returns the exact injected noise (captured at perturbation time)."""

    def __init__(self, eps_x, eps_a):
        self.eps_x, self.eps_a = eps_x, eps_a

    def __call__(self, x_t, a_t, cond, cond_graph, t, mask):
        return self.eps_x, self.eps_a


class _ZeroModel:
    def __call__(self, x_t, a_t, cond, cond_graph, t, mask):
        return torch.zeros_like(x_t), torch.zeros_like(a_t)


class TestScoreMatchingLoss:
    def _setup(self, b=4, n=6, seed=0):
        x0, a0, mask = small_graph_tensors(b=b, n=n, seed=seed)
        cond = torch.randn(b, n, 8, dtype=torch.float64)
        abar = torch.zeros(b, n, n, dtype=torch.float64)
        return x0, a0, cond, abar, mask

    def test_perfect_predictor_zero_loss(self):
        sch = NoiseSchedule()
        x0, a0, cond, abar, mask = self._setup()
        gen = torch.Generator().manual_seed(1)
        t = 1.0 - torch.rand(4, generator=gen, dtype=torch.float64)
        eps_x = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        eps_a = symmetric_noise(a0.shape, generator=gen, dtype=torch.float64)
        model = _OracleModel(eps_x, eps_a)
        loss = score_matching_loss(
            model, x0, a0, cond, abar, mask, sch, t=t, noise=(eps_x, eps_a)
        )
        assert float(loss) == 0.0

    def test_zero_predictor_matches_entry_count(self):
        sch = NoiseSchedule()
        x0, a0, cond, abar, mask = self._setup(b=64)
        gen = torch.Generator().manual_seed(2)
        total, reps = 0.0, 60
        for _ in range(reps):
            total += float(
                score_matching_loss(_ZeroModel(), x0, a0, cond, abar, mask, sch, generator=gen)
            )
        expected = float(active_entry_count(mask, x0.shape[2]).mean())
        assert expected == 6 * 14 + 6 * 5
        assert abs(total / reps - expected) / expected < 0.05

    def test_permutation_consistency(self):
        sch = NoiseSchedule()
        b, n = 2, 7
        x0, a0, mask = small_graph_tensors(b=b, n=n, seed=5)
        cond = torch.randn(b, n, 8, dtype=torch.float64)
        abar = (torch.rand(b, n, n) < 0.3).double()
        abar = torch.triu(abar, 1)
        abar = abar + abar.transpose(1, 2)
        gen = torch.Generator().manual_seed(11)
        t = 1.0 - torch.rand(b, generator=gen, dtype=torch.float64)
        eps_x = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        eps_a = symmetric_noise(a0.shape, generator=gen, dtype=torch.float64)

        from fairgrid.denoiser import Denoiser, DenoiserConfig

        torch.manual_seed(0)
        model = Denoiser(
            DenoiserConfig(layers=1, d_hidden=16, heads=2, m_walk=4, time_embed_dim=8,
                           k_cat=14, cond_dim=8)
        ).double()
        loss_base = score_matching_loss(
            model, x0, a0, cond, abar, mask, sch, t=t, noise=(eps_x, eps_a)
        )
        perm = torch.randperm(n, generator=gen)
        loss_perm = score_matching_loss(
            model,
            x0[:, perm],
            a0[:, perm][:, :, perm],
            cond[:, perm],
            abar[:, perm][:, :, perm],
            mask[:, perm],
            sch,
            t=t,
            noise=(eps_x[:, perm], eps_a[:, perm][:, :, perm]),
        )
        assert math.isclose(float(loss_base), float(loss_perm), rel_tol=1e-9)


class TestForwardSimulation:
    def test_euler_maruyama_moments_match_closed_form(self):
        # Exact first/second moments of the discretized chain (no sampling
        # noise): m' = (1 - b h / 2) m, v' = (1 - b h / 2)^2 v + b h.
        sch = NoiseSchedule(kind="linear-vp")
        steps = 1000
        h = 1.0 / steps
        m, v = 1.0, 0.0
        checkpoints = {0.25: None, 0.5: None, 1.0: None}
        for k in range(steps):
            beta = float(sch.beta(torch.tensor(k * h, dtype=torch.float64)))
            m = (1.0 - 0.5 * beta * h) * m
            v = (1.0 - 0.5 * beta * h) ** 2 * v + beta * h
            t_next = (k + 1) * h
            for target in checkpoints:
                if abs(t_next - target) < 1e-12:
                    checkpoints[target] = (m, v)
        for target, (m_em, v_em) in checkpoints.items():
            alpha, sigma = marginal_params(sch, target)
            assert abs(m_em - alpha) / alpha < 0.02, f"mean off at t={target}"
            assert abs(v_em - sigma**2) / sigma**2 < 0.02, f"variance off at t={target}"
