"""Adapter training against a frozen backbone.

The trainable adapter turns one sample's feature sequences into pseudo-token
rows. Those rows are prepended to the frozen embedding rows of the sample's
text and prompt; during training the gold label tokens (plus the end marker)
are appended and each is predicted from the position immediately before it.
Only adapter parameters receive gradient updates; the backbone checksum is
verified before and after every run.

Backbone pretraining corpus: every line keeps the exact geometry of an
adapter-time input by starting with a prefix of the same byte length as the
pseudo-token block. Half the lines carry an informative prefix (the label
text cycled to the prefix length), half carry a neutral all-space prefix, so
the frozen net learns both to read a planted prefix and to fall back on the
raw text when the prefix is uninformative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import (
    VARIANTS,
    AdapterConfig,
    AdapterParams,
    VariantState,
    build_pseudo_tokens,
    make_variant_state,
    save_adapter,
)
from .backbone import EOS, AssembledInput, FrozenBackbone, assemble_input, generate, tokenize
from .corpus import Dataset, FeatureSample, subsample_train
from .errors import ConfigError, InputError, LengthError, MmadaptError
from .metrics import MetricReport, format_label, parse_generated, score_predictions
from .optim import AdamWState, adamw_step, clip_global_norm, lr_schedule
from .presets import SEEDS, DatasetPreset


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    epochs: int = 20
    batch_size: int = 32
    warmup_fraction: float = 0.1
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    seeds: tuple[int, ...] = SEEDS
    variant: str = "full"
    train_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigError(f"warmup fraction must be in [0, 1), "
                              f"got {self.warmup_fraction}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip norm must be > 0, got {self.clip_norm}")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ConfigError(f"train fraction must be in (0, 1], "
                              f"got {self.train_fraction}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


# ---------------------------------------------------------------------------
# label loss


def label_loss(logits: T.Tensor, label_positions: list[int],
               label_ids: list[int]) -> T.Tensor:
    """Sum of next-token cross-entropies over the label block.

    Each label token (the end marker included) is predicted from the logits
    row immediately before its own position; every other position contributes
    nothing.
    """
    n = len(label_ids)
    if n < 1:
        raise InputError("need at least one label token")
    if len(label_positions) != n:
        raise InputError(f"{len(label_positions)} positions for {n} label ids")
    rows = logits.shape[0]
    for a, b in zip(label_positions, label_positions[1:]):
        if b != a + 1:
            raise InputError("label positions must be contiguous and ascending")
    first, last = label_positions[0], label_positions[-1]
    if first < 1 or last >= rows:
        raise LengthError(f"label positions {first}..{last} outside the "
                          f"predictable range 1..{rows - 1}")
    window = T.slice_rows(logits, first - 1, last)
    return T.rows_cross_entropy(window, label_ids, reduction="sum")


# ---------------------------------------------------------------------------
# sample preparation


@dataclass
class PreparedSample:
    sid: str
    gold: float
    audio: np.ndarray
    vision: np.ndarray
    text_rows: np.ndarray
    train_input: AssembledInput
    eval_input: AssembledInput


def label_token_ids(preset: DatasetPreset, value: float) -> list[int]:
    text = format_label(preset.task, value,
                        score_range=preset.score_range or (-3.0, 3.0),
                        class_count=max(preset.class_count, 1))
    return tokenize(text) + [EOS]


def eval_token_budget(preset: DatasetPreset) -> int:
    """Greedy decoding steps that cover the longest canonical label plus the
    end marker."""
    return 5 if preset.task == "score" else 2


def prepare_samples(backbone: FrozenBackbone, samples: list[FeatureSample],
                    preset: DatasetPreset, n_prefix: int,
                    drops_text: bool) -> list[PreparedSample]:
    prepared = []
    for s in samples:
        lm_text = "" if drops_text else s.text
        ids = label_token_ids(preset, s.label)
        prepared.append(PreparedSample(
            sid=s.sid,
            gold=s.label,
            audio=s.audio,
            vision=s.vision,
            text_rows=backbone.embed(tokenize(s.text)),
            train_input=assemble_input(backbone, lm_text, preset.prompt,
                                       n_prefix, ids),
            eval_input=assemble_input(backbone, lm_text, preset.prompt, n_prefix),
        ))
    return prepared


def _pseudo_for(params: AdapterParams, p: PreparedSample,
                state: VariantState) -> T.Tensor:
    return build_pseudo_tokens(
        params,
        T.Tensor._wrap(p.text_rows, False, None),
        T.Tensor._wrap(p.audio, False, None),
        T.Tensor._wrap(p.vision, False, None),
        state,
    )


def sample_loss(backbone: FrozenBackbone, params: AdapterParams,
                p: PreparedSample, state: VariantState) -> T.Tensor:
    pseudo = _pseudo_for(params, p, state)
    logits = backbone.forward_rows(p.train_input.rows_with(pseudo))
    return label_loss(logits, p.train_input.label_positions,
                      p.train_input.label_ids)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_split(backbone: FrozenBackbone, params: AdapterParams,
                   state: VariantState, prepared: list[PreparedSample],
                   preset: DatasetPreset,
                   max_new: int | None = None) -> MetricReport:
    """Greedy generation, parsing, and family metrics over prepared samples."""
    if not prepared:
        raise InputError("cannot evaluate an empty split")
    budget = max_new if max_new is not None else eval_token_budget(preset)
    preds: list[float] = []
    golds: list[float] = []
    fallbacks = 0
    for p in prepared:
        pseudo = _pseudo_for(params, p, state)
        text = generate(backbone, p.eval_input, pseudo, max_new=budget)
        value, fb = parse_generated(preset.task if preset.task == "score" else "emotion",
                                    text, class_count=max(preset.class_count, 1),
                                    neutral_class=preset.neutral_class)
        fallbacks += int(fb)
        preds.append(value)
        golds.append(p.gold)
    return score_predictions(preset.metric_family, preds, golds,
                             fallback_count=fallbacks,
                             class_count=max(preset.class_count, 1))


# ---------------------------------------------------------------------------
# backbone pretraining corpus


NEUTRAL_HINT_BYTE = " "


def build_pretrain_corpus(dataset: Dataset, preset: DatasetPreset,
                          n_prefix: int) -> list[str]:
    """Unique next-token training lines mirroring adapter-time geometry.

    Every train sample yields two lines: one whose first n_prefix bytes cycle
    the label text (the slots the pseudo tokens will occupy), and one whose
    prefix is neutral padding, forcing the net to also learn the text route.
    """
    if n_prefix < 0:
        raise ConfigError(f"prefix length must be >= 0, got {n_prefix}")
    lines: list[str] = []
    seen: set[str] = set()
    for s in dataset["train"]:
        label_text = format_label(preset.task, s.label,
                                  score_range=preset.score_range or (-3.0, 3.0),
                                  class_count=max(preset.class_count, 1))
        body = s.text + preset.prompt + label_text
        hinted = (label_text * n_prefix)[:n_prefix] + body
        neutral = NEUTRAL_HINT_BYTE * n_prefix + body
        for line in (hinted, neutral):
            if len(tokenize(line)) != n_prefix + len(tokenize(body)):
                raise ConfigError("prefix bytes must tokenize one-to-one; "
                                  "use ASCII label and prompt text")
            if line not in seen:
                seen.add(line)
                lines.append(line)
    if not lines:
        raise InputError("train split produced no pretraining lines")
    return lines


# ---------------------------------------------------------------------------
# training runs


@dataclass
class RunResult:
    seed: int
    variant: str
    best_epoch: int | None
    best_valid: float | None
    history: list[dict]
    step_losses: list[float]
    params: AdapterParams
    state: VariantState
    checkpoint_path: Path | None


def _chunks(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def train_run(backbone: FrozenBackbone, dataset: Dataset,
              adapter_config: AdapterConfig, config: TrainConfig, seed: int,
              out_dir: str | Path | None = None) -> RunResult:
    """One seeded training run; returns the best-validation parameters.

    Deterministic: the RNG draws happen in a fixed order (parameter init,
    then variant substitutes, then one shuffle per epoch), so a given
    (config, dataset, backbone, seed) always produces identical checkpoint
    bytes.
    """
    backbone.verify()
    preset = dataset.preset
    rng = np.random.default_rng(seed)
    params = AdapterParams.init(adapter_config, rng)
    state = make_variant_state(config.variant, adapter_config, rng)

    train_samples = subsample_train(dataset["train"], config.train_fraction, seed)
    if not train_samples:
        raise InputError("empty train split")
    prepared_train = prepare_samples(backbone, train_samples, preset,
                                     adapter_config.token_count,
                                     state.drops_text_input)
    prepared_valid = prepare_samples(backbone, dataset["valid"], preset,
                                     adapter_config.token_count,
                                     state.drops_text_input)

    batches_per_epoch = math.ceil(len(prepared_train) / config.batch_size)
    total_steps = max(1, config.epochs * batches_per_epoch)
    opt_state = AdamWState()
    best_params = params.clone()
    best_state = state
    best_valid: float | None = None
    best_epoch: int | None = None
    history: list[dict] = []
    step_losses: list[float] = []
    log_lines: list[str] = []
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(prepared_train))
        epoch_losses: list[float] = []
        for batch in _chunks(order, config.batch_size):
            lr = lr_schedule(step, total_steps, config.learning_rate,
                             config.warmup_fraction)
            params.zero_grads()
            batch_losses = []
            inv = 1.0 / len(batch)
            for idx in batch:
                with T.Tape() as tape:
                    loss = sample_loss(backbone, params, prepared_train[int(idx)],
                                       state)
                    tape.backward(T.scale(loss, inv))
                batch_losses.append(loss.item())
            clip_global_norm(params.named(), config.clip_norm)
            adamw_step(params.named(), opt_state, lr,
                       weight_decay=config.weight_decay)
            mean_loss = float(np.mean(batch_losses))
            step_losses.append(mean_loss)
            log_lines.append(json.dumps({"step": step, "lr": lr,
                                         "loss": mean_loss}))
            step += 1
            epoch_losses.extend(batch_losses)
        valid_report = evaluate_split(backbone, params, state, prepared_valid,
                                      preset)
        metric = valid_report.primary
        record = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                  "valid_metric": metric,
                  "valid_fallbacks": valid_report.fallback_count}
        history.append(record)
        log_lines.append(json.dumps(record))
        if metric is not None and (best_valid is None or metric > best_valid):
            best_valid = metric
            best_epoch = epoch
            best_params = params.clone()

    backbone.verify()

    checkpoint_path: Path | None = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out / f"adapter-{config.variant}-seed{seed}.msea"
        save_adapter(checkpoint_path, best_params, best_state,
                     backbone_checksum=backbone.checksum)
        log_path = out / f"train-{config.variant}-seed{seed}.jsonl"
        log_path.write_text("\n".join(log_lines) + ("\n" if log_lines else ""),
                            encoding="utf-8")
    return RunResult(seed, config.variant, best_epoch, best_valid, history,
                     step_losses, best_params, best_state, checkpoint_path)


# ---------------------------------------------------------------------------
# multi-seed protocol


@dataclass
class RunReport:
    variant: str
    eval_split: str
    per_seed: list[dict]
    mean: dict[str, float | None]
    std: dict[str, float | None]
    failed_seeds: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"variant": self.variant, "eval_split": self.eval_split,
                "per_seed": self.per_seed, "mean": self.mean, "std": self.std,
                "failed_seeds": self.failed_seeds}


def aggregate_seed_metrics(rows: list[dict[str, float | None]]):
    """Arithmetic mean and population standard deviation per metric key.

    Keys where any seed reports an undefined value aggregate to None, keeping
    the mean an honest plain average of the rows underneath it.
    """
    if not rows:
        return {}, {}
    keys = rows[0].keys()
    mean: dict[str, float | None] = {}
    std: dict[str, float | None] = {}
    for key in keys:
        values = [r[key] for r in rows]
        if any(v is None for v in values):
            mean[key] = None
            std[key] = None
            continue
        m = sum(values) / len(values)
        mean[key] = m
        std[key] = math.sqrt(sum((v - m) ** 2 for v in values) / len(values))
    return mean, std


def multi_seed_run(backbone: FrozenBackbone, dataset: Dataset,
                   adapter_config: AdapterConfig, config: TrainConfig,
                   out_dir: str | Path | None = None,
                   eval_split: str = "test") -> RunReport:
    """Train once per seed, evaluate each best checkpoint, report the average.

    A failing seed is recorded with its error and excluded from the average;
    at least one seed must succeed.
    """
    per_seed: list[dict] = []
    failed: list[dict] = []
    rows: list[dict[str, float | None]] = []
    for seed in config.seeds:
        try:
            result = train_run(backbone, dataset, adapter_config, config, seed,
                               out_dir)
            prepared = prepare_samples(backbone, dataset[eval_split],
                                       dataset.preset,
                                       adapter_config.token_count,
                                       result.state.drops_text_input)
            report = evaluate_split(backbone, result.params, result.state,
                                    prepared, dataset.preset)
            rows.append(dict(report.values))
            per_seed.append({"seed": seed, "metrics": dict(report.values),
                             "best_epoch": result.best_epoch,
                             "best_valid": result.best_valid,
                             "fallbacks": report.fallback_count})
        except MmadaptError as exc:
            failed.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    if not rows:
        raise InputError(f"every seed failed: {failed}")
    mean, std = aggregate_seed_metrics(rows)
    report = RunReport(config.variant, eval_split, per_seed, mean, std, failed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"report-{config.variant}.json"
        path.write_text(json.dumps(report.to_json(), indent=2) + "\n",
                        encoding="utf-8")
    return report
