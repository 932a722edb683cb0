"""Finite-difference verification of the reverse-mode gradients.

Two layers of checking:

    primitives  every differentiable tensor operation, one at a time, against
                central finite differences (tolerance 1e-6)
    full        the composed pipeline (feature sequences -> adapter ->
                frozen backbone -> label loss) checked per parameter group
                on a deliberately small configuration (tolerance 1e-4)

Both are callable from tests and from the command line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, AdapterParams, VariantState
from .backbone import EOS, BackboneConfig, FrozenBackbone, assemble_input, init_weights, tokenize
from .trainer import sample_loss, PreparedSample

PRIMITIVE_TOL = 1e-6
FULL_TOL = 1e-4
FD_STEP = 1e-5
# the composed pipeline is longer, so roundoff dominates at small steps; a
# larger step keeps central differences in their accurate regime
FULL_FD_STEP = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<24s} max rel err "
                f"{self.max_rel_err:.3e} (tol {self.tolerance:.0e})")


def _fd_grad(fn, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn()
        flat[i] = keep - step
        lo = fn()
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check(name: str, build, arrays: dict[str, np.ndarray],
           tolerance: float, step: float = FD_STEP) -> GradCheckResult:
    """Compare tape gradients of sum(build(tensors)) against central
    differences for every input array."""
    tensors = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with T.Tape() as tape:
        out = build(tensors)
        tape.backward(out)
    worst = 0.0
    for key, tensor in tensors.items():
        def value() -> float:
            plain = {k: T.Tensor._wrap(t.data, False, None)
                     for k, t in tensors.items()}
            return build(plain).item()

        numeric = _fd_grad(value, tensor.data, step)
        worst = max(worst, _rel_err(tensor.grad, numeric))
    return GradCheckResult(name, worst, tolerance)


def gradcheck_primitives(seed: int = 0) -> list[GradCheckResult]:
    """Finite-difference check for each differentiable primitive."""
    rng = np.random.default_rng(seed)

    def mat(r, c):
        return rng.standard_normal((r, c))

    w = T.Tensor._wrap(rng.standard_normal((4, 5)), False, None)
    wc = T.Tensor._wrap(rng.standard_normal((3, 4)), False, None)
    w44 = T.Tensor._wrap(np.abs(rng.standard_normal((4, 4))), False, None)
    checks = [
        ("add", lambda t: T.sum_all(T.hadamard(T.add(t["a"], t["b"]), w)),
         {"a": mat(4, 5), "b": mat(4, 5)}),
        ("add_rowvec", lambda t: T.sum_all(T.hadamard(T.add_rowvec(t["a"], t["b"]), w)),
         {"a": mat(4, 5), "b": mat(1, 5)}),
        ("add_scalar", lambda t: T.sum_all(T.hadamard(T.add_scalar(t["a"], t["s"]), w)),
         {"a": mat(4, 5), "s": mat(1, 1)}),
        ("scale", lambda t: T.sum_all(T.hadamard(T.scale(t["a"], -1.3), w)),
         {"a": mat(4, 5)}),
        ("matmul", lambda t: T.sum_all(T.hadamard(T.matmul(t["a"], t["b"]), wc)),
         {"a": mat(3, 6), "b": mat(6, 4)}),
        ("hadamard", lambda t: T.sum_all(T.hadamard(T.hadamard(t["a"], t["b"]), w)),
         {"a": mat(4, 5), "b": mat(4, 5)}),
        ("sigmoid", lambda t: T.sum_all(T.hadamard(T.sigmoid(t["a"]), w)),
         {"a": mat(4, 5)}),
        ("tanh", lambda t: T.sum_all(T.hadamard(T.tanh(t["a"]), w)),
         {"a": mat(4, 5)}),
        ("gelu", lambda t: T.sum_all(T.hadamard(T.gelu(t["a"]), w)),
         {"a": mat(4, 5)}),
        ("exp", lambda t: T.sum_all(T.hadamard(
            T.elementwise_unary(t["a"], "exp"), w)), {"a": 0.3 * mat(4, 5)}),
        ("log", lambda t: T.sum_all(T.hadamard(T.elementwise_unary(
            T.hadamard(t["a"], t["a"]), "log"), w)),
         {"a": 2.0 + np.abs(mat(4, 5))}),
        ("transpose", lambda t: T.sum_all(T.hadamard(T.transpose(t["a"]), w)),
         {"a": mat(5, 4)}),
        ("slice_rows", lambda t: T.sum_all(T.hadamard(
            T.slice_rows(t["a"], 1, 5), w)), {"a": mat(7, 5)}),
        ("slice_cols", lambda t: T.sum_all(T.hadamard(
            T.slice_cols(t["a"], 2, 7), w)), {"a": mat(4, 9)}),
        ("concat_rows", lambda t: T.sum_all(T.hadamard(
            T.concat_rows([t["a"], t["b"]]), w)),
         {"a": mat(1, 5), "b": mat(3, 5)}),
        ("stack_columns", lambda t: T.sum_all(T.hadamard(
            T.stack_columns([t["a"], t["b"]]), w)),
         {"a": mat(4, 2), "b": mat(4, 3)}),
        ("reduce_mean_rows", lambda t: T.sum_all(T.hadamard(
            T.reduce_mean_rows(t["a"]), T.slice_rows(w, 0, 1))),
         {"a": mat(6, 5)}),
        ("sum_all", lambda t: T.sum_all(t["a"]), {"a": mat(4, 5)}),
        ("softmax_rows", lambda t: T.sum_all(T.hadamard(
            T.softmax_rows(t["a"]), w)), {"a": mat(4, 5)}),
        ("layernorm_rows", lambda t: T.sum_all(T.hadamard(
            T.layernorm_rows(t["a"], t["g"], t["b"]), w)),
         {"a": mat(4, 5), "g": mat(1, 5), "b": mat(1, 5)}),
        ("causal_attention", lambda t: T.sum_all(T.hadamard(
            T.softmax_rows(T.causal_attention_scores(t["q"], t["k"], 0.5)),
            w44)), {"q": mat(4, 3), "k": mat(4, 3)}),
        ("softmax_cross_entropy", lambda t: T.softmax_cross_entropy(t["a"], 2),
         {"a": mat(1, 7)}),
        ("rows_cross_entropy", lambda t: T.rows_cross_entropy(
            t["a"], [1, 0, 3], reduction="sum"), {"a": mat(3, 5)}),
        ("embedding_lookup", lambda t: T.sum_all(T.hadamard(
            T.embedding_lookup(t["e"], [0, 2, 2, 1]), w)),
         {"e": mat(3, 5)}),
    ]
    return [_check(name, build, arrays, PRIMITIVE_TOL)
            for name, build, arrays in checks]


def _tiny_pipeline(seed: int):
    """Deterministic miniature of the full training path."""
    rng = np.random.default_rng(seed)
    backbone_config = BackboneConfig(embed_width=16, layers=1, heads=2,
                                     ffn_mult=2, max_seq=48)
    backbone = FrozenBackbone(backbone_config,
                              init_weights(backbone_config, rng, trainable=False))
    adapter_config = AdapterConfig(audio_width=6, vision_width=5,
                                   audio_hidden=8, vision_hidden=7,
                                   mix_width=32, token_count=4, embed_width=16)
    params = AdapterParams.init(adapter_config, rng)
    text = "ok"
    label_ids = tokenize("1") + [EOS]
    prepared = PreparedSample(
        sid="gradcheck",
        gold=1.0,
        audio=rng.standard_normal((5, 6)),
        vision=rng.standard_normal((4, 5)),
        text_rows=backbone.embed(tokenize(text)),
        train_input=assemble_input(backbone, text, " label:", 4, label_ids),
        eval_input=assemble_input(backbone, text, " label:", 4),
    )
    return backbone, params, prepared


def gradcheck_full(seed: int = 0) -> list[GradCheckResult]:
    """Per-parameter-group check of the composed adapter->backbone->loss
    gradient on a small configuration."""
    backbone, params, prepared = _tiny_pipeline(seed)
    state = VariantState("full")
    with T.Tape() as tape:
        loss = sample_loss(backbone, params, prepared, state)
        tape.backward(loss)
    analytic = {name: tensor.grad.copy() for name, tensor in params.named()}

    def value() -> float:
        return sample_loss(backbone, params, prepared, state).item()

    results = []
    for name, tensor in params.named():
        numeric = _fd_grad(value, tensor.data, step=FULL_FD_STEP)
        results.append(GradCheckResult(name, _rel_err(analytic[name], numeric),
                                       FULL_TOL))
    return results


def render_results(results: list[GradCheckResult]) -> str:
    lines = [r.line() for r in results]
    worst = max(r.max_rel_err for r in results)
    verdict = "PASS" if all(r.passed for r in results) else "FAIL"
    lines.append(f"{verdict}  overall worst {worst:.3e}")
    return "\n".join(lines)
