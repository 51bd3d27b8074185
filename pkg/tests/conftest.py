"""Shared fixtures and the acceptance-suite result summary."""

from __future__ import annotations

import pytest
import torch

import fairgrid.citygrid as cg
from fairgrid.denoiser import DenoiserConfig
from fairgrid.experiment import TrainingConfig, train_denoiser
from fairgrid.fairdemand import fair_demand_state, pretrain_fair_demand
from fairgrid.sde import NoiseSchedule

# Collected (number, description, passed, detail) rows from the acceptance
# tests, printed as a summary block at the end of the session.
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, description: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((number, description, passed, detail))
    status = "PASS" if passed else "FAIL"
    line = f"[acceptance] criterion {number}: {status} - {description}"
    if detail:
        line += f" ({detail})"
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d}: {status} - {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset() -> cg.Dataset:
    config = cg.GeneratorConfig(regions=8, node_range=(12, 18), balance=0.6)
    return cg.generate_synthetic_city(config, seed=42)


@pytest.fixture(scope="session")
def balanced_dataset() -> cg.Dataset:
    config = cg.GeneratorConfig(regions=8, node_range=(14, 20), balance=1.0)
    return cg.generate_synthetic_city(config, seed=7)


@pytest.fixture(scope="session")
def toy_checkpoint(tmp_path_factory):
    """A near-converged small denoiser used by sampler tests: returns
    (checkpoint path, training dataset, schedule).

    The toy task is deliberately memorizable (few regions, small graphs), so
    the learned score gets close to exact; solver cross-checks need that.
    """
    config = cg.GeneratorConfig(regions=16, node_range=(10, 12), balance=0.7)
    dataset = cg.generate_synthetic_city(config, seed=77)
    module, _ = pretrain_fair_demand(dataset, epochs=5, seed=3)
    fair_state = fair_demand_state(module)
    denoiser_config = DenoiserConfig(
        layers=2, d_hidden=48, heads=4, m_walk=8, time_embed_dim=32, k_cat=14, cond_dim=64
    )
    schedule = NoiseSchedule(kind="linear-vp")
    training = TrainingConfig(epochs=600, batch_size=8, lr=3e-4, dtype="float64")
    path = tmp_path_factory.mktemp("toy") / "toy.ckpt"
    train_denoiser(
        dataset, fair_state, denoiser_config, schedule, training, seed=5, out_path=path
    )
    return path, dataset, schedule


@pytest.fixture(autouse=True)
def _seed_torch():
    # Unit tests that rely on the global RNG get a stable baseline.
    torch.manual_seed(1234)
    yield
