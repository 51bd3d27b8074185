"""Command-line interface.

Subcommands: synth, pretrain-fairness, train, sample, evaluate, baseline,
moran, run, inspect. Exit codes: 0 on success, 2 for configuration problems
(bad flags, malformed files, version mismatches), 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import AllocationBudget, drf_allocate, walking_based
from .citygrid import (
    Dataset,
    GeneratorConfig,
    generate_synthetic_city,
    load_dataset,
    save_dataset,
)
from .denoiser import DenoiserConfig
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DatasetFormatError,
    FairgridError,
)
from .experiment import (
    ExperimentConfig,
    TrainingConfig,
    desk_preset,
    inspect_checkpoint,
    run_pipeline,
    save_fairness_checkpoint,
    sample_with_checkpoint,
    save_generated,
    train_denoiser,
    load_fairness_checkpoint,
)
from .fairdemand import pretrain_fair_demand
from .metrics import (
    evaluate_layouts,
    grid_rook_weights,
    local_morans_i,
    render_comparison,
)
from .sampler import SamplerConfig
from .sde import NoiseSchedule

CONFIG_EXIT = 2
RUNTIME_EXIT = 3


def _cmd_synth(args) -> int:
    config = GeneratorConfig(
        regions=args.regions,
        node_range=(args.node_min, args.node_max),
        balance=args.balance,
        n_max=args.n_max,
        residence_frac=args.residence_frac,
    )
    dataset = generate_synthetic_city(config, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} regions to {args.out}")
    return 0


def _cmd_pretrain_fairness(args) -> int:
    dataset = load_dataset(args.dataset)
    module, history = pretrain_fair_demand(
        dataset,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        hidden=args.hidden,
    )
    save_fairness_checkpoint(args.out, module, history)
    print(
        f"pretrained fair-demand module: loss {history['loss'][0]:.4f} -> "
        f"{history['loss'][-1]:.4f}; wrote {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    fair_state = load_fairness_checkpoint(args.fairness_ckpt)
    denoiser_config = DenoiserConfig(
        layers=args.layers,
        d_hidden=args.d_hidden,
        heads=args.heads,
        m_walk=args.m_walk,
        k_cat=dataset.k_cat,
        cond_dim=fair_state["hidden"],
    )
    schedule = NoiseSchedule(kind=args.schedule)
    training = TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        weight_decay=args.weight_decay,
        lr_decay=args.lr_decay,
        dtype=args.dtype,
        checkpoint_every=args.checkpoint_every,
    )
    curve = train_denoiser(
        dataset,
        fair_state,
        denoiser_config,
        schedule,
        training,
        args.seed,
        args.out,
        checkpoint_dir=args.checkpoint_dir,
        resume_from=args.resume,
        log=print,
    )
    curve_path = Path(str(args.out) + ".loss.json")
    with open(curve_path, "w") as fh:
        json.dump(curve, fh)
    print(f"trained {len(curve)} epochs: loss {curve[0]:.3f} -> {curve[-1]:.3f}; wrote {args.out}")
    return 0


def _cmd_sample(args) -> int:
    dataset = load_dataset(args.dataset)
    config = SamplerConfig(
        method=args.method,
        steps=args.steps,
        clamp_residences=not args.no_clamp,
        decode_threshold=args.threshold,
    )
    layouts = sample_with_checkpoint(
        args.ckpt, dataset, config, args.seed, batch_size=args.batch_size
    )
    save_generated(
        args.out,
        dataset,
        layouts,
        {
            "kind": "generated-layouts",
            "checkpoint": str(args.ckpt),
            "base_seed": args.seed,
            "sampler": config.to_json(),
        },
    )
    print(f"sampled {len(layouts)} layouts to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    dataset = load_dataset(args.dataset)
    generated = load_dataset(args.generated)
    gen_ids = [r.region_id for r in generated.region_records()]
    ds_ids = [r.region_id for r in dataset.region_records()]
    if gen_ids != ds_ids:
        raise ConfigError("generated layouts do not align with the dataset's regions")
    report = evaluate_layouts(generated.graphs(), dataset)
    with open(args.out, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = render_comparison({"evaluated": report})
    if args.text:
        with open(args.text, "w") as fh:
            fh.write(table + "\n")
    print(table)
    return 0


def _cmd_baseline(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.method == "walking":
        layouts, report = walking_based(dataset)
        grants = []
    else:
        if args.budget is None:
            raise ConfigError("--budget is required for the drf baseline")
        with open(args.budget) as fh:
            budget = AllocationBudget.from_json(json.load(fh))
        layouts, grants = drf_allocate(dataset, budget)
        if not grants:
            print("notice: nothing to allocate (no region derives a requirement)")
        report = evaluate_layouts(layouts, dataset)
    records = [(rec, graph) for (rec, _), graph in zip(dataset.records, layouts)]
    out_ds = Dataset(
        records=records,
        categories=dataset.categories,
        grid_size_m=dataset.grid_size_m,
        walk_threshold_m=dataset.walk_threshold_m,
        feature_seed=dataset.feature_seed,
    )
    save_dataset(out_ds, args.out, extra_header={"provenance": {"kind": f"baseline-{args.method}"}})
    if args.log and args.method == "drf":
        with open(args.log, "w") as fh:
            for g in grants:
                fh.write(json.dumps(g.to_json()) + "\n")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(render_comparison({args.method: report}))
    return 0


_MORAN_VALUES = ("accessibility", "life_service", "elderly_care", "diversity", "composite")


def _cmd_moran(args) -> int:
    dataset = load_dataset(args.dataset)
    report = evaluate_layouts(dataset.graphs(), dataset)
    rows = [row for row in report.per_region if not row.get("skipped")]
    if args.value == "composite":
        values = np.array([row["composite"] for row in rows])
    else:
        values = np.array([row[args.value] for row in rows])
    weights = grid_rook_weights(len(rows))
    moran = local_morans_i(values, weights)
    with open(args.out, "w") as fh:
        fh.write(f"region_id,{args.value},local_moran_i\n")
        for row, v, m in zip(rows, values, moran):
            fh.write(f"{row['region_id']},{float(v)!r},{float(m)!r}\n")
    print(f"wrote per-region Moran's I for {len(rows)} regions to {args.out}")
    return 0


def _cmd_run(args) -> int:
    if args.preset:
        config = desk_preset()
    else:
        if args.config is None:
            raise ConfigError("run needs --config FILE or --preset desk")
        with open(args.config) as fh:
            config = ExperimentConfig.from_json(json.load(fh))
    run_dir = run_pipeline(config, args.run_dir, log=print)
    print(f"pipeline complete: {run_dir}")
    return 0


def _cmd_inspect(args) -> int:
    print(inspect_checkpoint(args.ckpt))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairgrid",
        description="Fairness-aware facility-layout generation for gridded cities.",
    )
    parser.add_argument("--version", action="version", version=f"fairgrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city dataset")
    p.add_argument("--regions", type=int, default=64)
    p.add_argument("--node-min", type=int, default=14)
    p.add_argument("--node-max", type=int, default=24)
    p.add_argument("--balance", type=float, default=1.0)
    p.add_argument("--n-max", type=int, default=64)
    p.add_argument("--residence-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("pretrain-fairness", help="pretrain the fair-demand module")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_pretrain_fairness)

    p = sub.add_parser("train", help="train the graph denoiser")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--fairness-ckpt", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--lr-decay", type=float, default=0.0)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--d-hidden", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--m-walk", type=int, default=20)
    p.add_argument("--schedule", choices=("cosine", "linear-vp"), default="cosine")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--checkpoint-dir", type=Path, default=None)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate layouts from a trained checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--method", choices=("dpm3", "euler-maruyama"), default="dpm3")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-clamp", action="store_true", help="do not hold residences fixed")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("evaluate", help="score generated layouts against a dataset")
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--text", type=Path, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("baseline", help="run a reference allocation method")
    p.add_argument("--method", choices=("walking", "drf"), required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--budget", type=Path, default=None)
    p.add_argument("--log", type=Path, default=None, help="grant decisions as JSON lines")
    p.add_argument("--report", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("moran", help="per-region local Moran's I of a metric")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--value", choices=_MORAN_VALUES, default="accessibility")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_moran)

    p = sub.add_parser("run", help="execute the full pipeline into a run directory")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--preset", choices=("desk",), default=None)
    p.add_argument("--run-dir", type=Path, required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, DatasetFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except FairgridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(f"internal error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
