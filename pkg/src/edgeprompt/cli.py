"""Command-line pipeline driver.

Subcommands: synth | train | integrate | eval | export. Every command is
driven by the merged (preset <- config file <- flags) configuration and is
deterministic for fixed inputs and seeds; no output file embeds wall-clock
time. Exit codes: 0 success, 2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .encoder import build_class_table, contrastive_warmup, init_dual_encoder, load_encoder, save_encoder
from .errors import (
    ConfigurationError,
    ContractError,
    DeserializationError,
    EdgePromptError,
    NumericError,
    SamplingError,
    ShapeError,
    SplitError,
    TrainingAbort,
)
from .integration import (
    accuracy_of,
    ensemble_predict,
    export_features,
    load_uploads,
    write_feature_csv,
    zero_shot_predict,
    EnsembleModel,
)
from .prompts import save_stack
from .seeds import derive_seed
from .synth import (
    DomainShift,
    DomainSpec,
    export_dataset_dir,
    generate_domain,
    load_dataset_dir,
    make_few_shot_split,
)
from .training import build_edges, train

_CONFIG_ERRORS = (
    ConfigurationError,
    SplitError,
    ShapeError,
    DeserializationError,
    ContractError,
    FileNotFoundError,
)
_RUNTIME_ERRORS = (TrainingAbort, NumericError, SamplingError)


def _dataset_dir(out: Path) -> Path:
    return out / "data"


def _encoder_path(out: Path) -> Path:
    return out / "encoder.ckpt"


def _stacks_dir(out: Path) -> Path:
    return out / "stacks"


def cmd_synth(config: dict, out: Path) -> int:
    seed = config["seed"]
    K = config["dataset"]["K"]
    specs = cfgmod.source_specs(config)
    tspec = cfgmod.target_spec(config)
    split_cfg = config["dataset"]["split"]
    splits = []
    for spec in specs:
        dataset = generate_domain(spec, K, derive_seed(seed, f"data{spec.domain_id}"))
        kwargs = (
            {"shots_per_class": split_cfg["shots"]}
            if split_cfg["mode"] == "shots"
            else {"annotated_fraction": split_cfg["fraction"]}
        )
        splits.append(
            make_few_shot_split(dataset, seed=derive_seed(seed, f"split{spec.domain_id}"), **kwargs)
        )
    target = generate_domain(tspec, K, derive_seed(seed, f"data{tspec.domain_id}"))
    path = export_dataset_dir(_dataset_dir(out), splits, target, specs, tspec, K, seed)
    print(f"dataset written to {path}")
    return 0


def _load_data(out: Path):
    data_dir = _dataset_dir(out)
    if not (data_dir / "manifest.json").exists():
        raise ConfigurationError(f"no dataset at {data_dir}; run `synth` first")
    return load_dataset_dir(data_dir)


def _ensure_encoder(config: dict, out: Path, K: int):
    """Load the checkpoint if present, else initialize + warm up + save."""
    path = _encoder_path(out)
    enc_cfg = cfgmod.encoder_config(config)
    seed = config["seed"]
    if path.exists():
        encoder = load_encoder(path)
        table = build_class_table(encoder.config, K, derive_seed(seed, "table"))
        return encoder, table
    encoder = init_dual_encoder(enc_cfg, derive_seed(seed, "encoder"))
    table = build_class_table(enc_cfg, K, derive_seed(seed, "table"))
    wu = config["encoder"]["warmup"]
    if wu["steps"] > 0:
        warm_spec = DomainSpec(
            domain_id=-1,
            shift=DomainShift(
                rotation_angle=wu.get("rotation_angle", 0.0),
                channel_mix=None,
                noise_std=wu.get("noise_std", 0.05),
            ),
            n_per_class=wu.get("n_per_class", 24),
            image_size=enc_cfg.image_size,
            channels=enc_cfg.channels,
        )
        held_out = generate_domain(warm_spec, K, derive_seed(seed, "warmup-data"))
        contrastive_warmup(
            encoder,
            table,
            held_out.images,
            held_out.labels,
            steps=wu["steps"],
            batch_size=wu["batch_size"],
            lr=wu["learning_rate"],
            temperature=wu["temperature"],
            seed=derive_seed(seed, "warmup"),
        )
    save_encoder(encoder, path)
    return encoder, table


def cmd_train(config: dict, out: Path) -> int:
    splits, target, _ = _load_data(out)
    encoder, table = _ensure_encoder(config, out, config["dataset"]["K"])
    pool = max(len(s.annotated_indices) for s in splits)
    tc = cfgmod.train_config(config, annotated_pool=pool)
    edges = build_edges(
        encoder.config, splits, direction=tc.direction, seed=derive_seed(config["seed"], "stacks")
    )
    edges, log = train(encoder, table, edges, splits, target.images, tc)
    stacks_dir = _stacks_dir(out)
    stacks_dir.mkdir(parents=True, exist_ok=True)
    for edge in edges:
        save_stack(edge.stack, stacks_dir / f"domain{edge.domain_id}.stack")
    log_path = log.write_jsonl(out / "trainlog.jsonl")
    print(f"trained {len(edges)} stacks -> {stacks_dir} ({tc.total_steps} steps, log {log_path})")
    return 0


def _stack_paths(out: Path, explicit: list[str] | None) -> list[Path]:
    if explicit:
        return [Path(p) for p in explicit]
    return sorted(_stacks_dir(out).glob("*.stack"))


def _build_ensemble(config: dict, out: Path, explicit_stacks: list[str] | None):
    _, target, manifest = _load_data(out)
    path = _encoder_path(out)
    if not path.exists():
        raise ConfigurationError(f"no encoder checkpoint at {path}; run `train` first")
    encoder = load_encoder(path)
    table = build_class_table(encoder.config, manifest["K"], derive_seed(config["seed"], "table"))
    paths = _stack_paths(out, explicit_stacks)
    if not paths:
        raise ConfigurationError(f"no stack files under {_stacks_dir(out)}")
    model = load_uploads(
        paths, encoder, table, config["eval"].get("average_probabilities", False)
    )
    return model, target


def _metrics(config: dict, model: EnsembleModel, target) -> dict:
    logits, predicted = ensemble_predict(model, target.images)
    zs_logits, zs_predicted = zero_shot_predict(model.encoder, model.table, target.images)
    per_domain = {}
    for stack in model.stacks:
        single = EnsembleModel(model.encoder, [stack], model.table, model.average_probabilities)
        _, single_pred = ensemble_predict(single, target.images)
        per_domain[str(stack.domain_id)] = accuracy_of(single_pred, target.labels, target.K)[
            "accuracy"
        ]
    return {
        "K": target.K,
        "target_count": len(target.labels),
        "direction": model.stacks[0].direction,
        "disabled_losses": sorted(config.get("ablation", {}).get("disable", [])),
        "ensemble": accuracy_of(predicted, target.labels, target.K),
        "zero_shot": accuracy_of(zs_predicted, target.labels, target.K),
        "per_domain_accuracy": per_domain,
        "predictions": None,  # filled by cmd_integrate for the artifact file
        "_logits": logits,
        "_zs_logits": zs_logits,
        "_predicted": predicted,
    }


def _public_metrics(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if not k.startswith("_") and k != "predictions"}


def cmd_integrate(config: dict, out: Path, explicit_stacks: list[str] | None) -> int:
    model, target = _build_ensemble(config, out, explicit_stacks)
    metrics = _metrics(config, model, target)
    metrics_path = out / config["eval"]["metrics"]
    metrics_path.write_text(json.dumps(_public_metrics(metrics), indent=1, sort_keys=True))
    predictions = {
        "labels": metrics["_predicted"].tolist(),
        "logits": [[float(v) for v in row] for row in metrics["_logits"]],
    }
    pred_path = out / config["eval"]["predictions"]
    pred_path.write_text(json.dumps(predictions, sort_keys=True))
    print(f"metrics -> {metrics_path} (ensemble acc {metrics['ensemble']['accuracy']:.4f}, "
          f"zero-shot {metrics['zero_shot']['accuracy']:.4f})")
    return 0


def cmd_eval(config: dict, out: Path, explicit_stacks: list[str] | None) -> int:
    model, target = _build_ensemble(config, out, explicit_stacks)
    metrics = _public_metrics(_metrics(config, model, target))
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_export(config: dict, out: Path, explicit_stacks: list[str] | None) -> int:
    model, target = _build_ensemble(config, out, explicit_stacks)
    rows, stats = export_features(model, target.images, target.labels, per_domain=True)
    csv_path = write_feature_csv(out / config["eval"]["features"], rows, model.encoder.config.d)
    stats_path = out / config["eval"]["feature_stats"]
    stats_path.write_text(json.dumps(stats, indent=1, sort_keys=True))
    print(f"features -> {csv_path}, statistics -> {stats_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeprompt",
        description="Synthesize domains, train edge prompt stacks, and integrate them centrally.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="toy")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--direction", choices=["v2t", "t2v"], default=None)
    common.add_argument(
        "--ablate", action="append", choices=["dda", "tcc", "tsd"], default=None,
        help="drop a loss term from the objective (repeatable)",
    )
    common.add_argument("--out", type=Path, default=Path("edgeprompt_out"))
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic datasets")
    sub.add_parser("train", parents=[common], help="warm up the encoder and train the edge stacks")
    for name, help_text in (
        ("integrate", "average uploaded stacks' logits and write metrics"),
        ("eval", "print evaluation metrics"),
        ("export", "export feature table and variance statistics"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("stacks", nargs="*", help="stack files (default: <out>/stacks/*.stack)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # keeps outputs byte-reproducible across runs
    try:
        config = cfgmod.load_config(
            args.config, preset=args.preset, seed=args.seed,
            direction=args.direction, ablate=args.ablate,
        )
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(config, out)
        if args.command == "train":
            return cmd_train(config, out)
        if args.command == "integrate":
            return cmd_integrate(config, out, args.stacks)
        if args.command == "eval":
            return cmd_eval(config, out, args.stacks)
        if args.command == "export":
            return cmd_export(config, out, args.stacks)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except _CONFIG_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as err:
        print(f"runtime abort: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
