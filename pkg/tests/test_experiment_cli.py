"""Experiment config, training persistence/resume, checkpoints and the CLI."""

import json

import numpy as np
import pytest
import torch

import fairgrid.citygrid as cg
from fairgrid.checkpoints import load_checkpoint, save_checkpoint
from fairgrid.cli import main
from fairgrid.denoiser import Denoiser, DenoiserConfig
from fairgrid.errors import CheckpointFormatError
from fairgrid.experiment import (
    ExperimentConfig,
    SynthConfig,
    TrainingConfig,
    desk_preset,
    inspect_checkpoint,
    load_denoiser,
    train_denoiser,
)
from fairgrid.fairdemand import fair_demand_state, pretrain_fair_demand
from fairgrid.sde import NoiseSchedule

TINY_DENOISER = DenoiserConfig(
    layers=1, d_hidden=16, heads=2, m_walk=4, time_embed_dim=8, k_cat=14, cond_dim=64
)


@pytest.fixture(scope="module")
def tiny_setup():
    config = cg.GeneratorConfig(regions=8, node_range=(10, 12), balance=0.5, n_max=16)
    dataset = cg.generate_synthetic_city(config, seed=31)
    module, _ = pretrain_fair_demand(dataset, epochs=2, seed=1)
    return dataset, fair_demand_state(module)


class TestConfig:
    def test_round_trips_unchanged(self):
        config = desk_preset()
        blob = json.dumps(config.to_json(), sort_keys=True)
        again = ExperimentConfig.from_json(json.loads(blob))
        assert json.dumps(again.to_json(), sort_keys=True) == blob
        assert again.config_hash() == config.config_hash()

    def test_hash_changes_with_content(self):
        a = desk_preset()
        b = desk_preset()
        b.seeds.train += 1
        assert a.config_hash() != b.config_hash()


class TestTraining:
    def test_zero_lr_leaves_parameters_unchanged(self, tiny_setup, tmp_path):
        dataset, fair_state = tiny_setup
        training = TrainingConfig(epochs=2, batch_size=4, lr=0.0, weight_decay=0.0, dtype="float64")
        out = tmp_path / "zero.ckpt"
        train_denoiser(dataset, fair_state, TINY_DENOISER, NoiseSchedule(), training, 3, out)
        model, _, _, _ = load_denoiser(out)
        torch.manual_seed(3)
        fresh = Denoiser(TINY_DENOISER).to(torch.float64)
        for trained, init in zip(model.parameters(), fresh.parameters()):
            assert torch.equal(trained, init)

    def test_resume_matches_uninterrupted_run_bitwise(self, tiny_setup, tmp_path):
        dataset, fair_state = tiny_setup
        schedule = NoiseSchedule(kind="cosine")
        full_cfg = TrainingConfig(epochs=6, batch_size=4, lr=3e-4, dtype="float64")
        out_full = tmp_path / "full.ckpt"
        curve_full = train_denoiser(
            dataset, fair_state, TINY_DENOISER, schedule, full_cfg, 9, out_full
        )

        half_cfg = TrainingConfig(epochs=3, batch_size=4, lr=3e-4, dtype="float64")
        out_half = tmp_path / "half.ckpt"
        train_denoiser(dataset, fair_state, TINY_DENOISER, schedule, half_cfg, 9, out_half)
        out_resumed = tmp_path / "resumed.ckpt"
        curve_resumed = train_denoiser(
            dataset, fair_state, TINY_DENOISER, schedule, full_cfg, 9, out_resumed,
            resume_from=out_half,
        )
        assert curve_resumed == curve_full
        model_a, _, _, _ = load_denoiser(out_full)
        model_b, _, _, _ = load_denoiser(out_resumed)
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert torch.equal(pa, pb)

    def test_divergence_keeps_last_finite_checkpoint(self, tiny_setup, tmp_path):
        import pytest as _pytest

        from fairgrid.errors import TrainingError

        dataset, fair_state = tiny_setup
        out = tmp_path / "diverged.ckpt"
        training = TrainingConfig(epochs=3, batch_size=4, lr=1e18, dtype="float64")
        with _pytest.raises(TrainingError):
            train_denoiser(
                dataset, fair_state, TINY_DENOISER, NoiseSchedule(), training, 2, out
            )
        payload = load_checkpoint(out, "denoiser")  # the pre-divergence state
        assert payload["training"]["epoch"] >= 0
        assert all(np.isfinite(v) for v in payload["training"]["loss_curve"])

    def test_fair_demand_divergence_restores_finite_state(self, tiny_setup):
        import pytest as _pytest

        from fairgrid.errors import TrainingError

        dataset, _ = tiny_setup
        # poison one region's features so the loss goes non-finite immediately
        records = []
        for record, graph in dataset.records:
            bad = cg.RegionRecord(
                region_id=record.region_id,
                urban_attributes=record.urban_attributes.copy(),
                demand=record.demand.copy(),
                grid_features=np.full_like(record.grid_features, np.nan),
                population=record.population,
                elderly_population=record.elderly_population,
            )
            records.append((bad, graph))
        poisoned = cg.Dataset(
            records=records,
            categories=dataset.categories,
            grid_size_m=dataset.grid_size_m,
            walk_threshold_m=dataset.walk_threshold_m,
            feature_seed=dataset.feature_seed,
        )
        with _pytest.raises(TrainingError):
            pretrain_fair_demand(poisoned, epochs=1, batch_size=4, lr=1e-3, seed=0)

    def test_pipeline_writes_only_inside_run_dir(self, tmp_path, monkeypatch):
        from fairgrid.denoiser import DenoiserConfig as DC
        from fairgrid.experiment import (
            FairnessTrainConfig,
            Seeds,
            SynthConfig,
            run_pipeline,
        )
        from fairgrid.sampler import SamplerConfig
        from fairgrid.sde import NoiseSchedule as NS

        workdir = tmp_path / "cwd"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        config = ExperimentConfig(
            name="containment",
            synth=SynthConfig(regions=6, node_range=(10, 11), balance=0.5, n_max=12),
            synth_eval=None,
            eval_dataset=None,
            fairness=FairnessTrainConfig(epochs=1, batch_size=3, lr=1e-5, hidden=16),
            denoiser=DC(layers=0, d_hidden=16, heads=2, m_walk=4, time_embed_dim=8,
                        k_cat=14, cond_dim=16),
            schedule=NS(kind="cosine"),
            training=TrainingConfig(epochs=1, batch_size=4, dtype="float64"),
            sampler=SamplerConfig(steps=10),
            seeds=Seeds(),
        )
        config.synth_eval = None
        run_dir = tmp_path / "run"
        run_pipeline(config, run_dir)
        assert list(workdir.iterdir()) == []
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert [s["status"] for s in manifest["stages"]] == ["complete"] * 6

    def test_checkpoint_metadata(self, tiny_setup, tmp_path):
        dataset, fair_state = tiny_setup
        out = tmp_path / "meta.ckpt"
        train_denoiser(
            dataset, fair_state, TINY_DENOISER, NoiseSchedule(),
            TrainingConfig(epochs=2, batch_size=4, dtype="float64"), 1, out,
        )
        payload = load_checkpoint(out, "denoiser")
        assert payload["training"]["epoch"] == 2
        assert len(payload["training"]["loss_curve"]) == 2
        assert payload["schedule"]["kind"] == "cosine"


class TestCheckpoints:
    def test_corrupt_file_is_format_error(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"this is not a checkpoint")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v99.ckpt"
        torch.save({"format_version": 99, "kind": "denoiser"}, path)
        with pytest.raises(CheckpointFormatError) as err:
            load_checkpoint(path)
        assert "version" in str(err.value)

    def test_kind_mismatch(self, tmp_path):
        path = tmp_path / "fair.ckpt"
        save_checkpoint(path, "fair-demand", {"x": 1})
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path, "denoiser")

    def test_inspect_fresh_checkpoint_reports_zero_epochs(self, tiny_setup, tmp_path):
        dataset, fair_state = tiny_setup
        out = tmp_path / "fresh.ckpt"
        train_denoiser(
            dataset, fair_state, TINY_DENOISER, NoiseSchedule(),
            TrainingConfig(epochs=0, batch_size=4, dtype="float64"), 1, out,
        )
        text = inspect_checkpoint(out)
        assert "epoch 0" in text
        assert "untrained" in text

    def test_inspect_reports_parameter_count(self, tiny_setup, tmp_path):
        dataset, fair_state = tiny_setup
        out = tmp_path / "insp.ckpt"
        train_denoiser(
            dataset, fair_state, TINY_DENOISER, NoiseSchedule(),
            TrainingConfig(epochs=1, batch_size=4, dtype="float64"), 1, out,
        )
        expected = Denoiser(TINY_DENOISER).parameter_count()
        assert f"denoiser parameters: {expected}" in inspect_checkpoint(out)


class TestCli:
    def test_synth_and_moran_and_baseline(self, tmp_path, capsys):
        ds_path = tmp_path / "city.jsonl"
        rc = main(
            [
                "synth", "--regions", "6", "--node-min", "10", "--node-max", "12",
                "--balance", "0.4", "--seed", "3", "--out", str(ds_path),
            ]
        )
        assert rc == 0
        assert ds_path.exists()

        rc = main(
            ["moran", "--dataset", str(ds_path), "--value", "accessibility",
             "--out", str(tmp_path / "moran.csv")]
        )
        assert rc == 0
        lines = (tmp_path / "moran.csv").read_text().splitlines()
        assert lines[0] == "region_id,accessibility,local_moran_i"
        assert len(lines) == 7

        rc = main(
            ["baseline", "--method", "walking", "--dataset", str(ds_path),
             "--out", str(tmp_path / "walk.jsonl"),
             "--report", str(tmp_path / "walk_report.json")]
        )
        assert rc == 0
        report = json.loads((tmp_path / "walk_report.json").read_text())
        assert "average" in report

    def test_drf_baseline_cli(self, tmp_path):
        ds_path = tmp_path / "city.jsonl"
        main(
            ["synth", "--regions", "3", "--node-min", "10", "--node-max", "12",
             "--balance", "0.0", "--seed", "5", "--out", str(ds_path)]
        )
        budget = {"total_units": [0, 4, 3] + [0] * 11, "per_region_cap": 30}
        budget_path = tmp_path / "budget.json"
        budget_path.write_text(json.dumps(budget))
        rc = main(
            ["baseline", "--method", "drf", "--dataset", str(ds_path),
             "--budget", str(budget_path), "--out", str(tmp_path / "drf.jsonl"),
             "--log", str(tmp_path / "grants.jsonl")]
        )
        assert rc == 0
        grants = [json.loads(l) for l in (tmp_path / "grants.jsonl").read_text().splitlines()]
        assert grants and all("region_id" in g for g in grants)

    def test_missing_dataset_is_config_exit(self, tmp_path):
        rc = main(
            ["moran", "--dataset", str(tmp_path / "nope.jsonl"),
             "--out", str(tmp_path / "m.csv")]
        )
        assert rc == 2

    def test_malformed_dataset_is_config_exit(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json\n")
        rc = main(["moran", "--dataset", str(bad), "--out", str(tmp_path / "m.csv")])
        assert rc == 2

    def test_run_requires_config_or_preset(self, tmp_path):
        rc = main(["run", "--run-dir", str(tmp_path / "run")])
        assert rc == 2

    def test_pretrain_and_inspect_cli(self, tmp_path):
        ds_path = tmp_path / "city.jsonl"
        main(
            ["synth", "--regions", "6", "--node-min", "10", "--node-max", "12",
             "--balance", "0.5", "--seed", "3", "--out", str(ds_path)]
        )
        ckpt = tmp_path / "fair.ckpt"
        rc = main(
            ["pretrain-fairness", "--dataset", str(ds_path), "--epochs", "2",
             "--batch", "3", "--lr", "1e-5", "--seed", "0", "--out", str(ckpt)]
        )
        assert rc == 0
        rc = main(["inspect", "--ckpt", str(ckpt)])
        assert rc == 0

    def test_inspect_version_mismatch_exit_code(self, tmp_path):
        path = tmp_path / "v99.ckpt"
        torch.save({"format_version": 99, "kind": "denoiser"}, path)
        assert main(["inspect", "--ckpt", str(path)]) == 2

    def test_train_sample_evaluate_flow(self, tmp_path):
        ds = tmp_path / "train.jsonl"
        main(
            ["synth", "--regions", "6", "--node-min", "10", "--node-max", "11",
             "--balance", "0.6", "--seed", "2", "--n-max", "12", "--out", str(ds)]
        )
        fair = tmp_path / "fair.ckpt"
        assert main(
            ["pretrain-fairness", "--dataset", str(ds), "--epochs", "1",
             "--batch", "3", "--hidden", "16", "--out", str(fair)]
        ) == 0
        model = tmp_path / "model.ckpt"
        rc = main(
            ["train", "--dataset", str(ds), "--fairness-ckpt", str(fair),
             "--epochs", "2", "--batch", "4", "--layers", "1", "--d-hidden", "16",
             "--heads", "2", "--m-walk", "4", "--seed", "1", "--out", str(model)]
        )
        assert rc == 0
        assert (tmp_path / "model.ckpt.loss.json").exists()
        gen = tmp_path / "generated.jsonl"
        rc = main(
            ["sample", "--ckpt", str(model), "--dataset", str(ds), "--seed", "4",
             "--method", "dpm3", "--steps", "10", "--out", str(gen)]
        )
        assert rc == 0
        report = tmp_path / "report.json"
        rc = main(
            ["evaluate", "--generated", str(gen), "--dataset", str(ds),
             "--out", str(report), "--text", str(tmp_path / "report.txt")]
        )
        assert rc == 0
        data = json.loads(report.read_text())
        assert set(data) >= {"life_service", "elderly_care", "diversity",
                             "accessibility", "gini", "average"}
        assert main(["inspect", "--ckpt", str(model)]) == 0
