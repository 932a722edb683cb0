"""Byte-level autoregressive backbone.

A small pre-norm decoder transformer over a fixed 259-token vocabulary
(256 raw bytes plus BOS/EOS/PAD). It is pretrained briefly on synthetic
prompt/label text, then frozen: weights become physically read-only and a
64-bit content checksum pins them for the rest of the experiment. Steering
happens purely through rows of continuous pseudo-token embeddings prepended
to the input.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (CheckpointError, ConfigError, FrozenViolation,
                     LengthError, TokenError)
from .optim import AdamWState, adamw_step, clip_global_norm, lr_schedule
from .serialize import checksum64, pack_tensors, read_container, write_container

VOCAB_SIZE = 259
BOS = 256  # reserved; the assembly pipeline never emits it
EOS = 257
PAD = 258  # reserved; samples are processed unpadded

BACKBONE_MAGIC = b"MSEB"


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes as ids. No specials are added."""
    return list(text.encode("utf-8"))


def detokenize(ids: Sequence[int]) -> str:
    """Byte ids back to text. Specials are dropped; invalid UTF-8 is replaced."""
    for i in ids:
        if not (0 <= i < VOCAB_SIZE):
            raise TokenError(f"id {i} outside vocabulary 0..{VOCAB_SIZE - 1}")
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class BackboneConfig:
    embed_width: int = 64
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    max_seq: int = 256

    def __post_init__(self) -> None:
        if self.embed_width <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ConfigError(f"backbone extents must be positive: {self}")
        if self.embed_width % self.heads != 0:
            raise ConfigError(
                f"embed_width {self.embed_width} not divisible by heads {self.heads}")
        if self.ffn_mult <= 0 or self.max_seq <= 0:
            raise ConfigError(f"backbone extents must be positive: {self}")

    def pack(self) -> bytes:
        return struct.pack("<6I", VOCAB_SIZE, self.embed_width, self.layers,
                           self.heads, self.ffn_mult, self.max_seq)

    @classmethod
    def unpack(cls, blob: bytes) -> "BackboneConfig":
        try:
            vocab, ew, layers, heads, ffn, max_seq = struct.unpack("<6I", blob)
        except struct.error as exc:
            raise CheckpointError(f"bad backbone config block: {exc}") from exc
        if vocab != VOCAB_SIZE:
            raise CheckpointError(f"vocabulary size {vocab} != {VOCAB_SIZE}")
        return cls(ew, layers, heads, ffn, max_seq)


def _uniform_linear(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_weights(config: BackboneConfig, rng: np.random.Generator,
                 trainable: bool = True) -> dict[str, T.Tensor]:
    d = config.embed_width
    f = d * config.ffn_mult
    w: dict[str, T.Tensor] = {}

    def add(name: str, arr: np.ndarray) -> None:
        w[name] = T.Tensor(arr, requires_grad=trainable)

    add("embed", rng.normal(0.0, 0.05, (VOCAB_SIZE, d)))
    add("pos", rng.normal(0.0, 0.05, (config.max_seq, d)))
    for i in range(config.layers):
        p = f"h{i}."
        add(p + "ln1.g", np.ones((1, d)))
        add(p + "ln1.b", np.zeros((1, d)))
        for nm in ("wq", "wk", "wv", "wo"):
            add(p + nm, _uniform_linear(rng, d, (d, d)))
        for nm in ("bq", "bk", "bv", "bo"):
            add(p + nm, np.zeros((1, d)))
        add(p + "ln2.g", np.ones((1, d)))
        add(p + "ln2.b", np.zeros((1, d)))
        add(p + "wf1", _uniform_linear(rng, d, (d, f)))
        add(p + "bf1", np.zeros((1, f)))
        add(p + "wf2", _uniform_linear(rng, f, (f, d)))
        add(p + "bf2", np.zeros((1, d)))
    add("lnf.g", np.ones((1, d)))
    add("lnf.b", np.zeros((1, d)))
    return w


def _forward(config: BackboneConfig, w: dict[str, T.Tensor], rows: T.Tensor) -> T.Tensor:
    """Embedded rows -> next-token logits at every position."""
    l, d = rows.shape
    if d != config.embed_width:
        raise T.DimensionError(f"input width {d} != embed width {config.embed_width}")
    if l > config.max_seq:
        raise LengthError(f"sequence length {l} exceeds max {config.max_seq}")
    dh = config.embed_width // config.heads
    inv = 1.0 / math.sqrt(dh)
    x = T.add(rows, T.slice_rows(w["pos"], 0, l))
    for i in range(config.layers):
        p = f"h{i}."
        h1 = T.layernorm_rows(x, w[p + "ln1.g"], w[p + "ln1.b"])
        q = T.add_rowvec(T.matmul(h1, w[p + "wq"]), w[p + "bq"])
        k = T.add_rowvec(T.matmul(h1, w[p + "wk"]), w[p + "bk"])
        v = T.add_rowvec(T.matmul(h1, w[p + "wv"]), w[p + "bv"])
        heads = []
        for j in range(config.heads):
            lo, hi = j * dh, (j + 1) * dh
            att = T.softmax_rows(T.causal_attention_scores(
                T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi), inv))
            heads.append(T.matmul(att, T.slice_cols(v, lo, hi)))
        merged = heads[0] if len(heads) == 1 else T.stack_columns(heads)
        x = T.add(x, T.add_rowvec(T.matmul(merged, w[p + "wo"]), w[p + "bo"]))
        h2 = T.layernorm_rows(x, w[p + "ln2.g"], w[p + "ln2.b"])
        ff = T.matmul(T.gelu(T.add_rowvec(T.matmul(h2, w[p + "wf1"]), w[p + "bf1"])),
                      w[p + "wf2"])
        x = T.add(x, T.add_rowvec(ff, w[p + "bf2"]))
    xf = T.layernorm_rows(x, w["lnf.g"], w["lnf.b"])
    return T.matmul(xf, T.transpose(w["embed"]))  # tied unembedding


class FrozenBackbone:
    """Immutable backbone: read-only weights plus a pinned content checksum."""

    def __init__(self, config: BackboneConfig, weights: dict[str, T.Tensor]) -> None:
        self.config = config
        self._weights = weights
        for t in weights.values():
            t.requires_grad = False
            t.data.setflags(write=False)
        self.checksum = self.content_checksum()

    def content_checksum(self) -> int:
        packed = pack_tensors([(n, t.data) for n, t in self._weights.items()])
        return checksum64(self.config.pack() + packed)

    def verify(self) -> None:
        if self.content_checksum() != self.checksum:
            raise FrozenViolation("frozen backbone weights drifted; aborting")

    def embed(self, ids: Sequence[int]) -> np.ndarray:
        """Constant embedding rows for token ids (no gradient path)."""
        idx = np.asarray(list(ids), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= VOCAB_SIZE):
            raise TokenError(f"id outside vocabulary 0..{VOCAB_SIZE - 1}")
        return self._weights["embed"].data[idx]

    def forward_rows(self, rows: T.Tensor) -> T.Tensor:
        return _forward(self.config, self._weights, rows)

    def save(self, path: str | Path) -> None:
        write_container(path, BACKBONE_MAGIC, self.config.pack(),
                        [(n, t.data) for n, t in self._weights.items()])

    @classmethod
    def load(cls, path: str | Path) -> "FrozenBackbone":
        config_blob, tensors = read_container(path, BACKBONE_MAGIC)
        config = BackboneConfig.unpack(config_blob)
        weights = {n: T.Tensor(arr) for n, arr in tensors}
        expected = {n for n in init_weights(config, np.random.default_rng(0), False)}
        if set(weights) != expected:
            raise CheckpointError("backbone checkpoint weight names do not match config")
        return cls(config, weights)


@dataclass
class AssembledInput:
    """One backbone input: optional pseudo-token prefix, then constant
    embedding rows for text, prompt, and (during training) label tokens."""

    const_rows: np.ndarray
    n_prefix: int
    text_len: int
    prompt_len: int
    label_ids: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.n_prefix + self.const_rows.shape[0]

    @property
    def label_positions(self) -> list[int]:
        start = self.n_prefix + self.text_len + self.prompt_len
        return list(range(start, start + len(self.label_ids)))

    def rows_with(self, pseudo: T.Tensor | None) -> T.Tensor:
        if self.n_prefix == 0:
            if pseudo is not None:
                raise T.DimensionError("input was assembled without a pseudo prefix")
            return T.Tensor._wrap(self.const_rows, False, None)
        if pseudo is None or pseudo.shape[0] != self.n_prefix:
            got = None if pseudo is None else pseudo.shape
            raise T.DimensionError(
                f"pseudo prefix must have {self.n_prefix} rows, got {got}")
        return T.concat_rows([pseudo, T.Tensor._wrap(self.const_rows, False, None)])


def assemble_input(backbone: FrozenBackbone, text: str, prompt: str,
                   n_prefix: int = 0, label_ids: Sequence[int] | None = None) -> AssembledInput:
    """Tokenize and embed the constant sections, leaving the prefix open."""
    text_ids = tokenize(text)
    prompt_ids = tokenize(prompt)
    label = list(label_ids) if label_ids else []
    total = n_prefix + len(text_ids) + len(prompt_ids) + len(label)
    if total > backbone.config.max_seq:
        raise LengthError(
            f"assembled length {total} exceeds max {backbone.config.max_seq}")
    if total == 0:
        raise LengthError("assembled input is empty")
    const = backbone.embed(text_ids + prompt_ids + label)
    return AssembledInput(const, n_prefix, len(text_ids), len(prompt_ids), label)


def generate(backbone: FrozenBackbone, assembled: AssembledInput,
             pseudo: T.Tensor | None = None, max_new: int = 8) -> str:
    """Greedy decoding from the end of the assembled input.

    Stops at EOS, after max_new tokens, or when the context fills up.
    Returns the decoded new bytes with EOS stripped.
    """
    rows = assembled.rows_with(pseudo).data
    out: list[int] = []
    for _ in range(max_new):
        if rows.shape[0] >= backbone.config.max_seq:
            break
        logits = backbone.forward_rows(T.Tensor._wrap(rows, False, None))
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        rows = np.concatenate([rows, backbone.embed([nxt])], axis=0)
    return detokenize(out)


def pretrain_backbone(corpus: Sequence[str], steps: int, seed: int,
                      config: BackboneConfig | None = None, lr: float = 3e-3,
                      weight_decay: float = 0.0) -> tuple[FrozenBackbone, list[float]]:
    """Train the backbone on plain next-token prediction, then freeze it.

    Each step draws one corpus line (seeded), appends EOS, and supervises
    every position. steps=0 freezes the seeded initialization untouched.
    """
    config = config or BackboneConfig()
    lines = [str(s) for s in corpus]
    if not lines or any(len(s) == 0 for s in lines):
        raise ConfigError("pretraining corpus must be non-empty strings")
    encoded = [tokenize(s) + [EOS] for s in lines]
    for ids in encoded:
        if len(ids) > config.max_seq:
            raise LengthError(f"corpus line of {len(ids)} tokens exceeds max_seq")
    rng = np.random.default_rng(seed)
    weights = init_weights(config, rng, trainable=True)
    named = list(weights.items())
    state = AdamWState()
    losses: list[float] = []
    for step in range(steps):
        ids = encoded[int(rng.integers(0, len(encoded)))]
        with T.Tape() as tape:
            x = T.embedding_lookup(weights["embed"], ids[:-1])
            logits = _forward(config, weights, x)
            loss = T.rows_cross_entropy(logits, ids[1:], reduction="mean")
            tape.backward(loss)
        clip_global_norm(named, 1.0)
        adamw_step(named, state, lr_schedule(step, steps, lr), weight_decay=weight_decay)
        T.zero_grads(weights.values())
        losses.append(loss.item())
    return FrozenBackbone(config, weights), losses
