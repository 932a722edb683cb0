"""Command-line surface tying the modules together.

Six subcommands: synth, pretrain-backbone, train, eval, ablate, gradcheck.
Every knob can come from a flat JSON config file (--config) and be overridden
by the matching command-line flag; the merged effective configuration is
archived as JSON next to the outputs before any work starts.

Exit codes: 0 success; 1 configuration or input validation failure; 2
numeric or unexpected runtime failure; 3 broken internal guarantee (frozen
weights drifted, or the gradient suite fails).

The default output root is ./runs, overridable with the MMADAPT_OUTPUT_ROOT
environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

from .adapter import VARIANTS, AdapterConfig, load_adapter
from .backbone import BackboneConfig, FrozenBackbone, pretrain_backbone
from .corpus import Dataset, SyntheticSpec, generate_synthetic, load_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    FrozenViolation,
    MmadaptError,
    NumericError,
    TapeStateError,
)
from .gradcheck import gradcheck_full, gradcheck_primitives, render_results
from .metrics import MetricReport, ablation_report
from .presets import SEEDS
from .trainer import (
    TrainConfig,
    build_pretrain_corpus,
    evaluate_split,
    multi_seed_run,
    prepare_samples,
)

ENV_OUTPUT_ROOT = "MMADAPT_OUTPUT_ROOT"

# flat schemas: key -> (type, default, help); None defaults marked required
# or resolved later from the dataset preset
_SCHEMAS: dict[str, dict[str, tuple]] = {
    "synth": {
        "out": (str, None, "dataset directory to create (required)"),
        "seed": (int, 1111, "generator seed"),
        "classes": (int, 3, "number of planted classes"),
        "noise": (float, 0.1, "feature noise sigma"),
        "train": (int, 2000, "train split size"),
        "valid": (int, 300, "validation split size"),
        "test": (int, 500, "test split size"),
        "audio_width": (int, 8, "audio feature width"),
        "vision_width": (int, 8, "vision feature width"),
        "min_len": (int, 4, "shortest feature sequence"),
        "max_len": (int, 10, "longest feature sequence"),
    },
    "pretrain-backbone": {
        "dataset": (str, None, "dataset directory (required)"),
        "out": (str, None, "output directory (default <root>/backbone)"),
        "seed": (int, 7, "initialization and sampling seed"),
        "steps": (int, 1500, "pretraining steps"),
        "lr": (float, 3e-3, "peak learning rate"),
        "weight_decay": (float, 0.0, "decoupled weight decay"),
        "embed_width": (int, 64, "embedding width"),
        "layers": (int, 2, "transformer layers"),
        "heads": (int, 2, "attention heads"),
        "ffn_mult": (int, 4, "feed-forward width multiplier"),
        "max_seq": (int, 256, "maximum sequence length"),
        "token_count": (int, None, "pseudo-token slots (default: preset)"),
    },
    "train": {
        "dataset": (str, None, "dataset directory (required)"),
        "backbone": (str, None, "frozen backbone checkpoint (required)"),
        "out": (str, None, "output directory (default <root>/train)"),
        "seed": (int, None, "single seed overriding the seed list"),
        "seeds": (str, None, "comma-separated seed list (default preset five)"),
        "variant": (str, "full", "ablation variant"),
        "epochs": (int, 20, "training epochs"),
        "batch_size": (int, 32, "gradient accumulation group size"),
        "learning_rate": (float, None, "peak learning rate (default: preset)"),
        "warmup_fraction": (float, 0.1, "linear warmup fraction"),
        "clip_norm": (float, 1.0, "global gradient clip"),
        "weight_decay": (float, 0.0, "decoupled weight decay"),
        "train_fraction": (float, 1.0, "train subsample fraction"),
        "audio_hidden": (int, None, "audio summary width (default: preset)"),
        "vision_hidden": (int, None, "vision summary width (default: preset)"),
        "mix_width": (int, 64, "shared mixing width"),
        "token_count": (int, None, "pseudo tokens (default: preset)"),
    },
    "eval": {
        "checkpoint": (str, None, "adapter checkpoint (required)"),
        "backbone": (str, None, "frozen backbone checkpoint (required)"),
        "dataset": (str, None, "dataset directory (required)"),
        "split": (str, "test", "split to score (train/valid/test)"),
        "out": (str, None, "optional directory for eval-report.json"),
    },
    "ablate": {
        "dataset": (str, None, "dataset directory (required)"),
        "backbone": (str, None, "frozen backbone checkpoint (required)"),
        "out": (str, None, "output directory (default <root>/ablate)"),
        "seeds": (str, None, "comma-separated seed list (default preset five)"),
        "seed": (int, None, "single seed overriding the seed list"),
        "epochs": (int, 20, "training epochs per variant"),
        "batch_size": (int, 32, "gradient accumulation group size"),
        "learning_rate": (float, None, "peak learning rate (default: preset)"),
        "warmup_fraction": (float, 0.1, "linear warmup fraction"),
        "clip_norm": (float, 1.0, "global gradient clip"),
        "weight_decay": (float, 0.0, "decoupled weight decay"),
        "audio_hidden": (int, None, "audio summary width (default: preset)"),
        "vision_hidden": (int, None, "vision summary width (default: preset)"),
        "mix_width": (int, 64, "shared mixing width"),
        "token_count": (int, None, "pseudo tokens (default: preset)"),
    },
    "gradcheck": {
        "seed": (int, 0, "seed for the checked instances"),
        "out": (str, None, "optional directory for gradcheck.txt"),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmadapt",
        description="Desk-scale laboratory for steering a frozen byte-level "
                    "language model with multimodal pseudo tokens.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in _SCHEMAS.items():
        p = sub.add_parser(command, help=f"{command} subcommand")
        p.add_argument("--config", type=str, default=None,
                       help="flat JSON config file; flags override its values")
        for key, (typ, default, help_text) in schema.items():
            suffix = "" if default is None else f" [default: {default}]"
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ,
                           default=None, help=help_text + suffix)
    return parser


def _effective_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, validated against the schema."""
    schema = _SCHEMAS[command]
    merged = {key: default for key, (typ, default, _) in schema.items()}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} for {command}; "
                                  f"known keys: {sorted(schema)}")
            merged[key] = value
    for key in schema:
        flag = getattr(args, key)
        if flag is not None:
            merged[key] = flag
    return merged


def _output_dir(cfg: dict, command: str) -> Path:
    if cfg.get("out"):
        out = Path(cfg["out"])
    else:
        root = Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))
        out = root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _archive(out: Path, command: str, cfg: dict) -> None:
    snapshot = {"command": command, **cfg}
    path = out / f"{command}-config.json"
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _parse_seeds(cfg: dict) -> tuple[int, ...]:
    if cfg.get("seed") is not None:
        return (int(cfg["seed"]),)
    raw = cfg.get("seeds")
    if raw is None:
        return SEEDS
    if isinstance(raw, (list, tuple)):
        return tuple(int(s) for s in raw)
    try:
        return tuple(int(part) for part in str(raw).split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad seed list {raw!r}: {exc}")


def _require(cfg: dict, command: str, *keys: str) -> None:
    for key in keys:
        if not cfg.get(key):
            raise ConfigError(f"{command} needs --{key.replace('_', '-')} "
                              f"(or {key!r} in the config file)")


def _load_pair(cfg: dict) -> tuple[Dataset, FrozenBackbone]:
    dataset = load_dataset(cfg["dataset"])
    backbone = FrozenBackbone.load(cfg["backbone"])
    return dataset, backbone


def _resolve_adapter_config(cfg: dict, dataset: Dataset,
                            backbone: FrozenBackbone) -> AdapterConfig:
    defaults = dataset.preset.adapter_defaults
    return AdapterConfig(
        audio_width=dataset.preset.audio_width,
        vision_width=dataset.preset.vision_width,
        audio_hidden=cfg["audio_hidden"] or defaults.audio_hidden,
        vision_hidden=cfg["vision_hidden"] or defaults.vision_hidden,
        mix_width=cfg["mix_width"],
        token_count=cfg["token_count"] or defaults.token_count,
        embed_width=backbone.config.embed_width,
    )


def _resolve_train_config(cfg: dict, dataset: Dataset,
                          variant: str | None = None) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"] or dataset.preset.adapter_defaults.lr,
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        warmup_fraction=cfg["warmup_fraction"],
        clip_norm=cfg["clip_norm"],
        weight_decay=cfg["weight_decay"],
        seeds=_parse_seeds(cfg),
        variant=variant if variant is not None else cfg.get("variant", "full"),
        train_fraction=cfg.get("train_fraction", 1.0),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict) -> int:
    out = _output_dir(cfg, "synth")
    _archive(out, "synth", cfg)
    spec = SyntheticSpec(
        class_count=cfg["classes"], noise=cfg["noise"], train=cfg["train"],
        valid=cfg["valid"], test=cfg["test"], audio_width=cfg["audio_width"],
        vision_width=cfg["vision_width"], min_len=cfg["min_len"],
        max_len=cfg["max_len"], seed=cfg["seed"])
    dataset = generate_synthetic(spec, out)
    print(f"wrote {out} with splits "
          f"{ {s: len(dataset[s]) for s in ('train', 'valid', 'test')} }")
    print(f"nearest-centroid ceiling accuracy "
          f"{dataset.meta['ceiling_accuracy']:.4f}")
    return 0


def cmd_pretrain_backbone(cfg: dict) -> int:
    _require(cfg, "pretrain-backbone", "dataset")
    dataset = load_dataset(cfg["dataset"])
    out = _output_dir(cfg, "pretrain-backbone")
    _archive(out, "pretrain-backbone", cfg)
    token_count = cfg["token_count"] or dataset.preset.adapter_defaults.token_count
    corpus = build_pretrain_corpus(dataset, dataset.preset, token_count)
    config = BackboneConfig(embed_width=cfg["embed_width"], layers=cfg["layers"],
                            heads=cfg["heads"], ffn_mult=cfg["ffn_mult"],
                            max_seq=cfg["max_seq"])
    backbone, losses = pretrain_backbone(corpus, cfg["steps"], cfg["seed"],
                                         config=config, lr=cfg["lr"],
                                         weight_decay=cfg["weight_decay"])
    path = out / "backbone.mseb"
    backbone.save(path)
    log = out / "pretrain-log.jsonl"
    log.write_text(
        "".join(json.dumps({"step": i, "loss": l}) + "\n"
                for i, l in enumerate(losses)), encoding="utf-8")
    first = losses[0] if losses else float("nan")
    last = losses[-1] if losses else float("nan")
    print(f"wrote {path}")
    print(f"corpus lines {len(corpus)}, steps {len(losses)}, "
          f"loss {first:.4f} -> {last:.4f}")
    print(f"checksum {backbone.checksum:016x}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "train", "dataset", "backbone")
    dataset, backbone = _load_pair(cfg)
    out = _output_dir(cfg, "train")
    _archive(out, "train", cfg)
    adapter_config = _resolve_adapter_config(cfg, dataset, backbone)
    train_config = _resolve_train_config(cfg, dataset)
    report = multi_seed_run(backbone, dataset, adapter_config, train_config,
                            out_dir=out)
    for row in report.per_seed:
        print(f"seed {row['seed']}: best epoch {row['best_epoch']}, "
              f"valid {row['best_valid']}, test {row['metrics']}")
    for row in report.failed_seeds:
        print(f"seed {row['seed']}: FAILED {row['error']}")
    print(f"mean {report.mean}")
    print(f"std  {report.std}")
    print(f"report written to {out / f'report-{train_config.variant}.json'}")
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "eval", "checkpoint", "backbone", "dataset")
    dataset = load_dataset(cfg["dataset"])
    backbone = FrozenBackbone.load(cfg["backbone"])
    params, state, stored = load_adapter(cfg["checkpoint"])
    if stored != backbone.checksum:
        raise CheckpointError(
            "adapter checkpoint was trained against a different backbone "
            f"(stored {stored:016x}, loaded {backbone.checksum:016x})")
    split = cfg["split"]
    prepared = prepare_samples(backbone, dataset[split], dataset.preset,
                               params.config.token_count,
                               state.drops_text_input)
    report = evaluate_split(backbone, params, state, prepared, dataset.preset)
    print(report.render())
    if cfg.get("out"):
        out = _output_dir(cfg, "eval")
        _archive(out, "eval", cfg)
        payload = {"split": split, "variant": state.variant, **report.to_json()}
        (out / "eval-report.json").write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        print(f"report written to {out / 'eval-report.json'}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    _require(cfg, "ablate", "dataset", "backbone")
    dataset, backbone = _load_pair(cfg)
    out = _output_dir(cfg, "ablate")
    _archive(out, "ablate", cfg)
    adapter_config = _resolve_adapter_config(cfg, dataset, backbone)
    results: dict[str, MetricReport] = {}
    payload: dict[str, dict] = {}
    count = len(dataset["test"])
    for variant in VARIANTS:
        train_config = _resolve_train_config(cfg, dataset, variant=variant)
        report = multi_seed_run(backbone, dataset, adapter_config, train_config,
                                out_dir=out)
        results[variant] = MetricReport(dataset.preset.metric_family,
                                        report.mean, count)
        payload[variant] = report.to_json()
        print(f"{variant}: mean {report.mean}")
    table = ablation_report(results)
    print(table)
    (out / "ablate-report.json").write_text(json.dumps(payload, indent=2) + "\n",
                                            encoding="utf-8")
    (out / "ablate-table.txt").write_text(table + "\n", encoding="utf-8")
    print(f"table written to {out / 'ablate-table.txt'}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    results = gradcheck_primitives(cfg["seed"]) + gradcheck_full(cfg["seed"])
    text = render_results(results)
    print(text)
    if cfg.get("out"):
        out = _output_dir(cfg, "gradcheck")
        _archive(out, "gradcheck", cfg)
        (out / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    if not all(r.passed for r in results):
        # wrong gradients mean broken internal guarantees, not bad input
        return 3
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "pretrain-backbone": cmd_pretrain_backbone,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract reserves 2 for
        # runtime failures and 1 for validation problems
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = _effective_config(args.command, args)
        return _COMMANDS[args.command](cfg)
    except FrozenViolation as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 3
    except (NumericError, TapeStateError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except MmadaptError as exc:
        print(f"invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
