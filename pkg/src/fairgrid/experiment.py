"""End-to-end orchestration: configuration, the denoiser training loop,
experiment persistence and the full pipeline (synth -> pretrain-fairness ->
train -> sample -> evaluate -> baseline comparison).

Every run directory is reproducible from its manifest: the manifest records
the config hash and all seeds, stages write only inside the run directory,
and training state (optimizer, RNG) is checkpointed so a resumed run
continues bit-for-bit.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .baselines import walking_based
from .checkpoints import KIND_DENOISER, KIND_FAIR_DEMAND, load_checkpoint, save_checkpoint
from .citygrid import Dataset, GeneratorConfig, generate_synthetic_city, load_dataset, save_dataset
from .denoiser import Denoiser, DenoiserConfig
from .errors import ConfigError, PipelineError, TrainingError
from .fairdemand import (
    compute_condition_embeddings,
    fair_demand_from_state,
    fair_demand_state,
    pretrain_fair_demand,
)
from .metrics import MetricsReport, evaluate_layouts, render_comparison
from .sampler import SamplerConfig, generate_for_dataset
from .sde import NoiseSchedule, make_condition_graph, score_matching_loss

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class SynthConfig:
    """JSON-friendly mirror of the generator parameters."""

    regions: int = 64
    node_range: tuple[int, int] = (14, 24)
    balance: float = 1.0
    n_max: int = 64
    residence_frac: float = 0.2
    feature_dim: int = 16

    def to_generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            regions=self.regions,
            node_range=tuple(self.node_range),
            balance=self.balance,
            n_max=self.n_max,
            residence_frac=self.residence_frac,
            feature_dim=self.feature_dim,
        )

    def to_json(self) -> dict:
        return {
            "regions": self.regions,
            "node_range": list(self.node_range),
            "balance": self.balance,
            "n_max": self.n_max,
            "residence_frac": self.residence_frac,
            "feature_dim": self.feature_dim,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        out = cls(**obj)
        out.node_range = tuple(out.node_range)
        return out


@dataclass
class FairnessTrainConfig:
    epochs: int = 60
    batch_size: int = 6
    lr: float = 1e-5
    hidden: int = 64

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr, "hidden": self.hidden}

    @classmethod
    def from_json(cls, obj: dict) -> "FairnessTrainConfig":
        return cls(**obj)


@dataclass
class TrainingConfig:
    epochs: int = 1000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 1e-2
    lr_decay: float = 0.0  # optional per-epoch multiplicative decay
    dtype: str = "float64"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "lr_decay": self.lr_decay,
            "dtype": self.dtype,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingConfig":
        return cls(**obj)


@dataclass
class Seeds:
    synth: int = 101
    synth_eval: int = 202
    fairness: int = 303
    train: int = 404
    sample: int = 505

    def to_json(self) -> dict:
        return {
            "synth": self.synth,
            "synth_eval": self.synth_eval,
            "fairness": self.fairness,
            "train": self.train,
            "sample": self.sample,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Seeds":
        return cls(**obj)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: str | None = None
    eval_dataset: str | None = None
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    synth_eval: SynthConfig | None = field(
        default_factory=lambda: SynthConfig(regions=16, balance=0.3)
    )
    fairness: FairnessTrainConfig = field(default_factory=FairnessTrainConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seeds: Seeds = field(default_factory=Seeds)
    sample_batch_size: int = 16

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "eval_dataset": self.eval_dataset,
            "synth": None if self.synth is None else self.synth.to_json(),
            "synth_eval": None if self.synth_eval is None else self.synth_eval.to_json(),
            "fairness": self.fairness.to_json(),
            "denoiser": self.denoiser.to_json(),
            "schedule": self.schedule.to_json(),
            "training": self.training.to_json(),
            "sampler": self.sampler.to_json(),
            "seeds": self.seeds.to_json(),
            "sample_batch_size": self.sample_batch_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return cls(
            name=obj.get("name", "experiment"),
            dataset=obj.get("dataset"),
            eval_dataset=obj.get("eval_dataset"),
            synth=None if obj.get("synth") is None else SynthConfig.from_json(obj["synth"]),
            synth_eval=(
                None if obj.get("synth_eval") is None else SynthConfig.from_json(obj["synth_eval"])
            ),
            fairness=FairnessTrainConfig.from_json(obj["fairness"]),
            denoiser=DenoiserConfig.from_json(obj["denoiser"]),
            schedule=NoiseSchedule.from_json(obj["schedule"]),
            training=TrainingConfig.from_json(obj["training"]),
            sampler=SamplerConfig.from_json(obj["sampler"]),
            seeds=Seeds.from_json(obj["seeds"]),
            sample_batch_size=obj.get("sample_batch_size", 16),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def desk_preset() -> ExperimentConfig:
    """Desk-scale preset: 64 well-served training regions at capacity 64,
    200 training epochs, a 16-region imbalanced evaluation city. The hidden
    width is halved relative to the package default so the run stays
    within minutes on a single CPU core."""
    return ExperimentConfig(
        name="desk",
        synth=SynthConfig(regions=64, node_range=(14, 22), balance=1.0, n_max=64),
        synth_eval=SynthConfig(regions=16, node_range=(14, 22), balance=0.3, n_max=64),
        denoiser=DenoiserConfig(layers=3, d_hidden=64, heads=4, m_walk=20, cond_dim=64),
        training=TrainingConfig(epochs=200, batch_size=8, lr=3e-4, dtype="float64"),
        sampler=SamplerConfig(method="dpm3", steps=200),
    )


def dataset_training_tensors(
    dataset: Dataset, fair_state: dict, dtype: torch.dtype
) -> dict:
    """Precompute padded tensors (trimmed to the dataset's widest graph):
    clean node/edge tensors, masks, frozen condition embeddings and the
    static residence-walkability condition graphs."""
    fair_module = fair_demand_from_state(fair_state, dtype)
    cond_full = compute_condition_embeddings(fair_module, dataset, dtype)
    width = max(g.n_nodes for g in dataset.graphs())
    r = len(dataset)
    x0 = torch.zeros(r, width, dataset.k_cat, dtype=dtype)
    a0 = torch.zeros(r, width, width, dtype=dtype)
    abar = torch.zeros(r, width, width, dtype=dtype)
    mask = torch.zeros(r, width, dtype=torch.bool)
    for i, (_, graph) in enumerate(dataset.records):
        n = graph.n_nodes
        x0[i, :n] = torch.as_tensor(graph.categories_onehot[:n], dtype=dtype)
        a0[i, :n, :n] = torch.as_tensor(graph.adjacency[:n, :n], dtype=dtype)
        abar[i, :n, :n] = torch.as_tensor(
            make_condition_graph(graph, dataset.categories)[:n, :n], dtype=dtype
        )
        mask[i, :n] = True
    return {
        "x0": x0,
        "a0": a0,
        "cond": cond_full[:, :width].to(dtype),
        "abar": abar,
        "mask": mask,
        "width": width,
    }


def _denoiser_payload(
    model: Denoiser,
    schedule: NoiseSchedule,
    fair_state: dict,
    training: TrainingConfig,
    seed: int,
    epoch: int,
    loss_curve: list[float],
    optimizer: torch.optim.Optimizer,
) -> dict:
    return {
        "denoiser_config": model.config.to_json(),
        "schedule": schedule.to_json(),
        "state_dict": {k: v.clone() for k, v in model.state_dict().items()},
        "fairness": fair_state,
        "training": {
            "config": training.to_json(),
            "seed": seed,
            "epoch": epoch,
            "loss_curve": list(loss_curve),
            "optimizer_state": copy.deepcopy(optimizer.state_dict()),
            "rng_state": torch.get_rng_state(),
        },
    }


def train_denoiser(
    dataset: Dataset,
    fair_state: dict,
    denoiser_config: DenoiserConfig,
    schedule: NoiseSchedule,
    training: TrainingConfig,
    seed: int,
    out_path: str | Path,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    log=None,
) -> list[float]:
    """Optimize the noise-matching objective; returns the epoch-mean loss
    curve and writes the final checkpoint (with optimizer and RNG state, so
    a resumed run continues identically).

    On a non-finite loss the last end-of-epoch parameters are written to
    ``out_path`` before raising.
    """
    if denoiser_config.k_cat != dataset.k_cat:
        raise ConfigError(
            f"denoiser expects {denoiser_config.k_cat} categories, dataset has {dataset.k_cat}"
        )
    if denoiser_config.cond_dim != fair_state["hidden"]:
        raise ConfigError(
            f"denoiser conditioning width {denoiser_config.cond_dim} does not match "
            f"the fair-demand hidden width {fair_state['hidden']}"
        )
    dtype = DTYPES[training.dtype]
    tensors = dataset_training_tensors(dataset, fair_state, dtype)
    r = len(dataset)

    torch.manual_seed(seed)
    model = Denoiser(denoiser_config).to(dtype)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=training.lr, weight_decay=training.weight_decay
    )
    start_epoch = 0
    curve: list[float] = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from, KIND_DENOISER)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["training"]["optimizer_state"])
        torch.set_rng_state(payload["training"]["rng_state"])
        start_epoch = payload["training"]["epoch"]
        curve = list(payload["training"]["loss_curve"])

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    # Snapshot the starting state so an abort always leaves a loadable file.
    last_good = _denoiser_payload(
        model, schedule, fair_state, training, seed, start_epoch, curve, optimizer
    )
    for epoch in range(start_epoch, training.epochs):
        if training.lr_decay > 0.0:
            lr_now = training.lr * (1.0 - training.lr_decay) ** epoch
            for group in optimizer.param_groups:
                group["lr"] = lr_now
        perm = torch.randperm(r)
        batch_losses = []
        try:
            for start in range(0, r, training.batch_size):
                idx = perm[start : start + training.batch_size]
                loss = score_matching_loss(
                    model,
                    tensors["x0"][idx],
                    tensors["a0"][idx],
                    tensors["cond"][idx],
                    tensors["abar"][idx],
                    tensors["mask"][idx],
                    schedule,
                )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                batch_losses.append(float(loss.detach()))
        except TrainingError:
            save_checkpoint(out_path, KIND_DENOISER, last_good)
            raise
        curve.append(sum(batch_losses) / len(batch_losses))
        if log is not None and (epoch % 20 == 0 or epoch == training.epochs - 1):
            log(f"epoch {epoch + 1}/{training.epochs}: loss {curve[-1]:.3f}")
        last_good = _denoiser_payload(
            model, schedule, fair_state, training, seed, epoch + 1, curve, optimizer
        )
        if (
            checkpoint_dir is not None
            and training.checkpoint_every > 0
            and (epoch + 1) % training.checkpoint_every == 0
        ):
            save_checkpoint(checkpoint_dir / f"epoch_{epoch + 1:05d}.ckpt", KIND_DENOISER, last_good)

    save_checkpoint(out_path, KIND_DENOISER, last_good)
    return curve


def load_denoiser(path: str | Path, dtype: torch.dtype = torch.float64):
    """(model, schedule, fairness state, payload) from a checkpoint."""
    payload = load_checkpoint(path, KIND_DENOISER)
    config = DenoiserConfig.from_json(payload["denoiser_config"])
    model = Denoiser(config).to(dtype)
    state = {k: v.to(dtype) for k, v in payload["state_dict"].items()}
    model.load_state_dict(state)
    model.eval()
    schedule = NoiseSchedule.from_json(payload["schedule"])
    return model, schedule, payload["fairness"], payload


def save_fairness_checkpoint(path: str | Path, module, history: dict) -> None:
    payload = fair_demand_state(module)
    payload["history"] = history
    save_checkpoint(path, KIND_FAIR_DEMAND, payload)


def load_fairness_checkpoint(path: str | Path) -> dict:
    return load_checkpoint(path, KIND_FAIR_DEMAND)


def sample_with_checkpoint(
    ckpt_path: str | Path,
    dataset: Dataset,
    sampler_config: SamplerConfig,
    base_seed: int,
    batch_size: int = 16,
    dtype: torch.dtype = torch.float64,
):
    """Generate one layout per dataset region from a trained checkpoint."""
    model, schedule, fair_state, _ = load_denoiser(ckpt_path, dtype)
    fair_module = fair_demand_from_state(fair_state, dtype)
    cond = compute_condition_embeddings(fair_module, dataset, dtype)
    return generate_for_dataset(
        model, schedule, dataset, cond, sampler_config, base_seed,
        batch_size=batch_size, dtype=dtype,
    )


def save_generated(path: str | Path, dataset: Dataset, layouts, provenance: dict) -> None:
    """Persist generated layouts in the dataset format plus a provenance block."""
    by_region = {lay.region_id: lay for lay in layouts}
    records = []
    for record, _ in dataset.records:
        lay = by_region[record.region_id]
        records.append((record, lay.graph))
    out = Dataset(
        records=records,
        categories=dataset.categories,
        grid_size_m=dataset.grid_size_m,
        walk_threshold_m=dataset.walk_threshold_m,
        feature_seed=dataset.feature_seed,
    )
    prov = dict(provenance)
    prov["region_seeds"] = {str(lay.region_id): lay.seed for lay in layouts}
    save_dataset(out, path, extra_header={"provenance": prov})


_METRIC_KEYS = ("life_service", "elderly_care", "diversity", "accessibility", "gini", "average")


def write_comparison_plots(reports: dict[str, MetricsReport], plot_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    names = list(reports)
    for key in _METRIC_KEYS:
        fig, ax = plt.subplots(figsize=(4, 3))
        vals = [getattr(reports[n], key) for n in names]
        ax.bar(names, vals, color=["#4878d0", "#ee854a"][: len(names)])
        ax.set_title(key)
        ax.set_ylabel(key)
        fig.tight_layout()
        out = plot_dir / f"{key}.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        paths.append(out)
    return paths


class PipelineRun:
    """Executes the staged pipeline inside one run directory."""

    STAGES = ("synth", "pretrain-fairness", "train", "sample", "evaluate", "baseline")

    def __init__(self, config: ExperimentConfig, run_dir: str | Path, log=None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.log = log or (lambda msg: None)
        self.manifest_path = self.run_dir / "manifest.json"
        self.manifest = {
            "name": config.name,
            "config_hash": config.config_hash(),
            "seeds": config.seeds.to_json(),
            "package_version": __version__,
            "stages": [],
        }

    def _write_manifest(self) -> None:
        with open(self.manifest_path, "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _record(self, stage: str, outputs: list[str]) -> None:
        self.manifest["stages"].append(
            {"name": stage, "status": "complete", "outputs": outputs}
        )
        self._write_manifest()

    def run(self) -> Path:
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "data").mkdir(exist_ok=True)
        with open(self.run_dir / "config.json", "w") as fh:
            json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self._write_manifest()

        stage = "synth"
        try:
            train_path = self.run_dir / "data" / "train.jsonl"
            eval_path = self.run_dir / "data" / "eval.jsonl"
            if cfg.dataset is not None:
                train_ds = load_dataset(cfg.dataset)
                save_dataset(train_ds, train_path)
            elif cfg.synth is not None:
                train_ds = generate_synthetic_city(cfg.synth.to_generator(), cfg.seeds.synth)
                save_dataset(train_ds, train_path)
            else:
                raise ConfigError("config needs either a dataset path or a synth block")
            if cfg.eval_dataset is not None:
                eval_ds = load_dataset(cfg.eval_dataset)
                save_dataset(eval_ds, eval_path)
            elif cfg.synth_eval is not None:
                eval_ds = generate_synthetic_city(
                    cfg.synth_eval.to_generator(), cfg.seeds.synth_eval
                )
                save_dataset(eval_ds, eval_path)
            else:
                eval_ds = train_ds
                save_dataset(eval_ds, eval_path)
            self.log(f"synth: {len(train_ds)} train / {len(eval_ds)} eval regions")
            self._record(stage, ["data/train.jsonl", "data/eval.jsonl"])

            stage = "pretrain-fairness"
            module, history = pretrain_fair_demand(
                train_ds,
                epochs=cfg.fairness.epochs,
                batch_size=cfg.fairness.batch_size,
                lr=cfg.fairness.lr,
                seed=cfg.seeds.fairness,
                hidden=cfg.fairness.hidden,
            )
            fairness_path = self.run_dir / "fairness.ckpt"
            save_fairness_checkpoint(fairness_path, module, history)
            with open(self.run_dir / "fairness_history.json", "w") as fh:
                json.dump(history, fh, indent=2)
            self.log(
                f"pretrain-fairness: loss {history['loss'][0]:.4f} -> {history['loss'][-1]:.4f}"
            )
            self._record(stage, ["fairness.ckpt", "fairness_history.json"])

            stage = "train"
            fair_state = fair_demand_state(module)
            model_path = self.run_dir / "model.ckpt"
            curve = train_denoiser(
                train_ds,
                fair_state,
                cfg.denoiser,
                cfg.schedule,
                cfg.training,
                cfg.seeds.train,
                model_path,
                checkpoint_dir=self.run_dir / "checkpoints",
                log=self.log,
            )
            with open(self.run_dir / "loss_curve.json", "w") as fh:
                json.dump(curve, fh)
            self.log(f"train: loss {curve[0]:.3f} -> {curve[-1]:.3f}")
            self._record(stage, ["model.ckpt", "loss_curve.json"])

            stage = "sample"
            dtype = DTYPES[cfg.training.dtype]
            layouts = sample_with_checkpoint(
                model_path, eval_ds, cfg.sampler, cfg.seeds.sample,
                batch_size=cfg.sample_batch_size, dtype=dtype,
            )
            generated_path = self.run_dir / "generated.jsonl"
            save_generated(
                generated_path,
                eval_ds,
                layouts,
                {
                    "kind": "generated-layouts",
                    "checkpoint": "model.ckpt",
                    "base_seed": cfg.seeds.sample,
                    "sampler": cfg.sampler.to_json(),
                },
            )
            self._record(stage, ["generated.jsonl"])

            stage = "evaluate"
            report = evaluate_layouts([lay.graph for lay in layouts], eval_ds)
            with open(self.run_dir / "report.json", "w") as fh:
                json.dump(report.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            self.log(f"evaluate: average {report.average:.4f}")
            self._record(stage, ["report.json"])

            stage = "baseline"
            _, base_report = walking_based(eval_ds)
            with open(self.run_dir / "baseline_report.json", "w") as fh:
                json.dump(base_report.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            comparison = {
                "generated": report.to_json(),
                "walking_based": base_report.to_json(),
            }
            with open(self.run_dir / "comparison.json", "w") as fh:
                json.dump(comparison, fh, indent=2, sort_keys=True)
                fh.write("\n")
            table = render_comparison(
                {"walking-based": base_report, "generated": report}
            )
            with open(self.run_dir / "comparison.txt", "w") as fh:
                fh.write(table + "\n")
            write_comparison_plots(
                {"walking": base_report, "generated": report}, self.run_dir / "plots"
            )
            self.log("baseline: comparison written\n" + table)
            self._record(
                stage,
                ["baseline_report.json", "comparison.json", "comparison.txt", "plots/"],
            )
        except Exception as exc:
            self.manifest["stages"].append({"name": stage, "status": "failed", "error": str(exc)})
            self._write_manifest()
            raise PipelineError(stage, exc) from exc
        return self.run_dir


def run_pipeline(config: ExperimentConfig, run_dir: str | Path, log=None) -> Path:
    return PipelineRun(config, run_dir, log=log).run()


def inspect_checkpoint(path: str | Path) -> str:
    """Human-readable summary of a checkpoint file."""
    payload = load_checkpoint(path)
    kind = payload.get("kind")
    lines = [f"checkpoint: {path}", f"kind: {kind}", f"format version: {payload['format_version']}"]
    if kind == KIND_DENOISER:
        cfg = DenoiserConfig.from_json(payload["denoiser_config"])
        n_params = sum(int(v.numel()) for v in payload["state_dict"].values())
        fair = payload["fairness"]
        fair_params = sum(int(v.numel()) for v in fair["state_dict"].values())
        meta = payload["training"]
        curve = meta["loss_curve"]
        lines += [
            f"denoiser config: {cfg.to_json()}",
            f"schedule: {payload['schedule']}",
            f"denoiser parameters: {n_params}",
            f"fair-demand parameters: {fair_params} "
            f"(hidden={fair['hidden']}, k_cat={fair['k_cat']}, feature_dim={fair['feature_dim']})",
            f"training: epoch {meta['epoch']}, seed {meta['seed']}, dtype {meta['config']['dtype']}",
        ]
        if curve:
            lines.append(f"loss curve: first {curve[0]:.4f}, last {curve[-1]:.4f} ({len(curve)} epochs)")
        else:
            lines.append("loss curve: empty (untrained)")
    elif kind == KIND_FAIR_DEMAND:
        n_params = sum(int(v.numel()) for v in payload["state_dict"].values())
        lines += [
            f"shapes: attr_dim={payload['attr_dim']} k_cat={payload['k_cat']} "
            f"feature_dim={payload['feature_dim']} hidden={payload['hidden']}",
            f"parameters: {n_params}",
        ]
        hist = payload.get("history")
        if hist:
            lines.append(
                f"pretraining: loss {hist['loss'][0]:.4f} -> {hist['loss'][-1]:.4f}, "
                f"min entropy {hist['min_entropy'][0]:.4f} -> {hist['min_entropy'][-1]:.4f}"
            )
    else:
        lines.append("unknown checkpoint kind")
    return "\n".join(lines)
