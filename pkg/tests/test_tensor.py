"""Autodiff core: forward oracles, finite-difference gradient checks,
tape lifecycle rules."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from mmadapt import tensor as T
from mmadapt.errors import DimensionError, DomainError, TapeStateError, TokenError

from oracles import cross_entropy_scalar, fd_grad, matmul_loops, max_rel_err

RNG = np.random.default_rng(20260815)
PRIM_TOL = 1e-6  # primitive backward vs central differences, step 1e-5


def loss_of(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    """Reduce an op output to a scalar with fixed mixing weights."""
    return T.sum_all(T.hadamard(out, T.Tensor(w)))


def check_grads(build, arrays: dict[str, np.ndarray], tol: float = PRIM_TOL) -> None:
    """build(tensors) -> scalar Tensor; compares tape grads to central diffs."""
    tensors = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    with T.Tape() as tape:
        root = build(tensors)
        tape.backward(root)
    # the plain views share storage with the tensors above, so fd_grad's
    # in-place nudges are visible to the rebuilt forward pass
    plain = {k: T.Tensor._wrap(v.data, False, None) for k, v in tensors.items()}
    for name, t in tensors.items():
        fd = fd_grad(lambda: build(plain).item(), t.data)
        assert t.grad is not None, f"{name}: no gradient buffer"
        err = max_rel_err(t.grad, fd)
        assert err <= tol, f"{name}: rel err {err:.3e} > {tol}"


# ---------------------------------------------------------------------------
# forward oracles


def test_matmul_matches_triple_loop_oracle():
    for shape in [(1, 1, 1), (3, 4, 2), (5, 7, 6), (2, 9, 3)]:
        n, k, m = shape
        a = RNG.uniform(-2, 2, (n, k))
        b = RNG.uniform(-2, 2, (k, m))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        assert max_rel_err(got, matmul_loops(a, b), floor=1e-12) <= 1e-12


def test_gelu_matches_high_precision_gaussian_cdf():
    mpmath.mp.dps = 50
    for x in [-3.0, -1.0, -0.25, 0.0, 0.5, 1.0, 2.5]:
        want = float(mpmath.mpf(x) * mpmath.ncdf(mpmath.mpf(x)))
        got = T.gelu(T.Tensor([x])).data[0]
        assert abs(got - want) <= 1e-14 + 1e-12 * abs(want)


def test_gelu_at_one_reference_value():
    got = T.gelu(T.Tensor([1.0])).data[0]
    assert_allclose(got, 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0))), rtol=1e-15)


def test_sigmoid_tanh_exp_log_forwards():
    x = np.array([[-1.5, 0.0, 0.7]])
    assert_allclose(T.sigmoid(T.Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-15)
    assert_allclose(T.tanh(T.Tensor(x)).data, np.tanh(x), rtol=1e-15)
    assert_allclose(T.elementwise_unary(T.Tensor(x), "exp").data, np.exp(x), rtol=1e-15)
    pos = np.array([[0.2, 1.0, 3.0]])
    assert_allclose(T.elementwise_unary(T.Tensor(pos), "log").data, np.log(pos), rtol=1e-15)


def test_log_rejects_non_positive():
    with pytest.raises(DomainError):
        T.elementwise_unary(T.Tensor([[1.0, 0.0]]), "log")
    with pytest.raises(DomainError):
        T.elementwise_unary(T.Tensor([[-0.5]]), "log")


def test_reduce_mean_rows_example():
    out = T.reduce_mean_rows(T.Tensor([[1.0, 3.0], [5.0, 7.0]]))
    assert_array_equal(out.data, [[3.0, 5.0]])


def test_softmax_cross_entropy_two_logit_example():
    loss = T.softmax_cross_entropy(T.Tensor([10.0, -10.0]), 0)
    assert_allclose(loss.item(), math.log1p(math.exp(-20.0)), rtol=1e-6)


def test_softmax_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros(16)), 3)
    assert_allclose(loss.item(), math.log(16.0), rtol=1e-12)


def test_softmax_cross_entropy_matches_scalar_oracle():
    for _ in range(20):
        v = RNG.uniform(-5, 5, 11)
        t = int(RNG.integers(0, 11))
        got = T.softmax_cross_entropy(T.Tensor(v), t).item()
        assert abs(got - cross_entropy_scalar(list(v), t)) <= 1e-12


def test_softmax_rows_rows_sum_to_one():
    x = RNG.uniform(-4, 4, (5, 9))
    y = T.softmax_rows(T.Tensor(x)).data
    assert_allclose(y.sum(axis=1), np.ones(5), rtol=1e-12)
    assert np.all(y >= 0)


def test_embedding_lookup_rows_equal_table_rows():
    table = T.Tensor(RNG.uniform(-1, 1, (7, 4)))
    out = T.embedding_lookup(table, [5])
    assert_array_equal(out.data, table.data[[5]])
    out2 = T.embedding_lookup(table, [2, 2, 6])
    assert_array_equal(out2.data, table.data[[2, 2, 6]])


def test_embedding_lookup_rejects_out_of_range():
    table = T.Tensor(np.zeros((7, 4)))
    with pytest.raises(TokenError):
        T.embedding_lookup(table, [7])
    with pytest.raises(TokenError):
        T.embedding_lookup(table, [-1])


def test_causal_mask_future_rows_cannot_leak():
    """Changing a future key row leaves earlier softmax rows bit-identical."""
    q = RNG.uniform(-2, 2, (5, 4))
    k1 = RNG.uniform(-2, 2, (5, 4))
    k2 = k1.copy()
    k2[4] = RNG.uniform(-2, 2, 4) * 3.0
    s1 = T.softmax_rows(T.causal_attention_scores(T.Tensor(q), T.Tensor(k1), 0.5)).data
    s2 = T.softmax_rows(T.causal_attention_scores(T.Tensor(q), T.Tensor(k2), 0.5)).data
    assert_array_equal(s1[:4], s2[:4])
    # masked attention weights are exactly zero
    assert s1[0, 1] == 0.0 and s1[2, 3] == 0.0 and s1[2, 4] == 0.0


# ---------------------------------------------------------------------------
# gradient checks (central differences, step 1e-5)


def test_matmul_grads():
    check_grads(
        lambda t: loss_of(T.matmul(t["a"], t["b"]), W),
        {"a": RNG.uniform(-2, 2, (3, 4)), "b": RNG.uniform(-2, 2, (4, 2))},
    )


W = RNG.uniform(-1, 1, (3, 2))


def test_hadamard_add_scale_grads():
    w = RNG.uniform(-1, 1, (3, 3))
    check_grads(
        lambda t: loss_of(T.scale(T.add(T.hadamard(t["a"], t["b"]), t["c"]), 0.7), w),
        {k: RNG.uniform(-2, 2, (3, 3)) for k in "abc"},
    )


def test_add_rowvec_add_scalar_grads():
    w = RNG.uniform(-1, 1, (4, 3))
    check_grads(
        lambda t: loss_of(T.add_scalar(T.add_rowvec(t["x"], t["b"]), t["s"]), w),
        {"x": RNG.uniform(-2, 2, (4, 3)), "b": RNG.uniform(-2, 2, (1, 3)),
         "s": RNG.uniform(-2, 2, (1,))},
    )


@pytest.mark.parametrize("fname", ["sigmoid", "tanh", "gelu", "exp"])
def test_unary_grads(fname):
    w = RNG.uniform(-1, 1, (2, 5))
    check_grads(
        lambda t: loss_of(T.elementwise_unary(t["x"], fname), w),
        {"x": RNG.uniform(-2, 2, (2, 5))},
    )


def test_log_grads():
    w = RNG.uniform(-1, 1, (2, 4))
    check_grads(
        lambda t: loss_of(T.elementwise_unary(t["x"], "log"), w),
        {"x": RNG.uniform(0.2, 2, (2, 4))},
    )


def test_sigmoid_derivative_at_zero_is_quarter():
    x = T.Tensor([0.0], requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum_all(T.sigmoid(x)))
    assert_allclose(x.grad, [0.25], rtol=1e-15)


def test_gelu_derivative_matches_high_precision():
    mpmath.mp.dps = 40
    for xv in [-2.0, -0.6, 0.0, 0.3, 1.7]:
        x = T.Tensor([xv], requires_grad=True)
        with T.Tape() as tape:
            tape.backward(T.sum_all(T.gelu(x)))
        want = float(mpmath.diff(lambda z: z * mpmath.ncdf(z), mpmath.mpf(xv)))
        assert abs(x.grad[0] - want) <= 1e-12


def test_reduce_mean_sum_grads():
    w = RNG.uniform(-1, 1, (1, 4))
    check_grads(
        lambda t: loss_of(T.reduce_mean_rows(t["x"]), w),
        {"x": RNG.uniform(-2, 2, (5, 4))},
    )


def test_softmax_cross_entropy_grads():
    check_grads(
        lambda t: T.softmax_cross_entropy(t["v"], 2),
        {"v": RNG.uniform(-2, 2, 7)},
    )


def test_softmax_rows_grads():
    w = RNG.uniform(-1, 1, (3, 5))
    check_grads(
        lambda t: loss_of(T.softmax_rows(t["x"]), w),
        {"x": RNG.uniform(-2, 2, (3, 5))},
    )


def test_layernorm_grads():
    w = RNG.uniform(-1, 1, (3, 6))
    check_grads(
        lambda t: loss_of(T.layernorm_rows(t["x"], t["g"], t["b"]), w),
        {"x": RNG.uniform(-2, 2, (3, 6)), "g": RNG.uniform(0.5, 2, (1, 6)),
         "b": RNG.uniform(-1, 1, (1, 6))},
        tol=1e-5,  # composed of several row reductions; still far under 1e-4
    )


def test_causal_attention_grads():
    w = RNG.uniform(-1, 1, (4, 4))
    check_grads(
        lambda t: loss_of(T.softmax_rows(T.causal_attention_scores(t["q"], t["k"], 0.5)), w),
        {"q": RNG.uniform(-2, 2, (4, 3)), "k": RNG.uniform(-2, 2, (4, 3))},
    )


def test_slice_concat_stack_transpose_grads():
    w = RNG.uniform(-1, 1, (4, 2))

    def build(t):
        joined = T.concat_rows([t["a"], t["b"]])          # (4, 3)
        left = T.slice_cols(joined, 0, 1)                 # (4, 1)
        right = T.slice_rows(T.transpose(joined), 1, 3)   # rows 1..2 of (3, 4)
        wide = T.stack_columns([left, T.transpose(right)])  # (4, 3) -> take 2 cols
        return loss_of(T.slice_cols(wide, 0, 2), w)

    check_grads(build, {"a": RNG.uniform(-2, 2, (2, 3)), "b": RNG.uniform(-2, 2, (2, 3))})


def test_embedding_lookup_grads_scatter_add():
    table = T.Tensor(RNG.uniform(-1, 1, (6, 3)), requires_grad=True)
    w = np.ones((4, 3))
    with T.Tape() as tape:
        out = T.embedding_lookup(table, [1, 4, 1, 0])
        tape.backward(loss_of(out, w))
    want = np.zeros((6, 3))
    for i in [1, 4, 1, 0]:
        want[i] += 1.0
    assert_array_equal(table.grad, want)


def test_frozen_table_gets_no_gradient():
    table = T.Tensor(RNG.uniform(-1, 1, (6, 3)), requires_grad=False)
    x = T.Tensor(RNG.uniform(-1, 1, (4, 3)), requires_grad=True)
    with T.Tape() as tape:
        out = T.add(T.embedding_lookup(table, [0, 2, 3, 5]), x)
        tape.backward(T.sum_all(out))
    assert table.grad is None
    assert x.grad is not None


# ---------------------------------------------------------------------------
# tape lifecycle


def test_tape_is_single_use():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        root = T.sum_all(x)
        tape.backward(root)
        with pytest.raises(TapeStateError):
            tape.backward(root)


def test_backward_requires_recorded_root():
    x = T.Tensor([1.0], requires_grad=True)
    with pytest.raises(TapeStateError):
        T.backward(x)


def test_backward_requires_scalar_root():
    x = T.Tensor([[1.0, 2.0]], requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
        with pytest.raises(DimensionError):
            tape.backward(y)


def test_backward_linearity_across_fresh_tapes():
    """grad of (f+g) equals accumulated grads of f and g run separately."""
    xv = RNG.uniform(-2, 2, (3, 3))
    x1 = T.Tensor(xv, requires_grad=True)
    with T.Tape() as tape:
        root = T.add(T.sum_all(T.hadamard(x1, x1)), T.sum_all(T.tanh(x1)))
        tape.backward(root)
    x2 = T.Tensor(xv, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum_all(T.hadamard(x2, x2)))
    with T.Tape() as tape:
        tape.backward(T.sum_all(T.tanh(x2)))
    assert_allclose(x1.grad, x2.grad, rtol=1e-15)


def test_grads_accumulate_until_cleared():
    x = T.Tensor([2.0], requires_grad=True)
    for _ in range(3):
        with T.Tape() as tape:
            tape.backward(T.sum_all(T.scale(x, 5.0)))
    assert_allclose(x.grad, [15.0])
    x.zero_grad()
    assert x.grad is None


def test_ops_outside_tape_do_not_record():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.sum_all(x)
    assert y.tape is None and not y.requires_grad
    with pytest.raises(TapeStateError):
        T.backward(y)


def test_unreachable_grads_untouched():
    x = T.Tensor([1.0], requires_grad=True)
    y = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        _unused = T.scale(y, 3.0)
        root = T.sum_all(T.scale(x, 2.0))
        tape.backward(root)
    assert y.grad is None


def test_nested_tapes_rejected():
    with T.Tape():
        with pytest.raises(TapeStateError):
            with T.Tape():
                pass


# ---------------------------------------------------------------------------
# shape and domain validation


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as ei:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(ei.value)


def test_constructor_validation():
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((2, 2, 2, 2)))
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((0, 3)))
    with pytest.raises(DomainError):
        T.Tensor([np.nan, 1.0])
    with pytest.raises(DomainError):
        T.Tensor([np.inf])


def test_slice_bounds_checked():
    x = T.Tensor(np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        T.slice_rows(x, 2, 5)
    with pytest.raises(DimensionError):
        T.slice_cols(x, 3, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_transpose_involution(r, c, seed):
    x = np.random.default_rng(seed).uniform(-5, 5, (r, c))
    assert_array_equal(T.transpose(T.transpose(T.Tensor(x))).data, x)


def test_rows_cross_entropy_matches_per_row_oracle():
    x = RNG.uniform(-4, 4, (6, 9))
    targets = [int(t) for t in RNG.integers(0, 9, 6)]
    want_rows = [cross_entropy_scalar(list(r), t) for r, t in zip(x, targets)]
    got_mean = T.rows_cross_entropy(T.Tensor(x), targets, "mean").item()
    got_sum = T.rows_cross_entropy(T.Tensor(x), targets, "sum").item()
    assert abs(got_mean - sum(want_rows) / 6) <= 1e-12
    assert abs(got_sum - sum(want_rows)) <= 1e-12


def test_rows_cross_entropy_grads():
    targets = [2, 0, 4]
    check_grads(
        lambda t: T.rows_cross_entropy(t["x"], targets, "sum"),
        {"x": RNG.uniform(-2, 2, (3, 5))},
    )


def test_rows_cross_entropy_validation():
    x = T.Tensor(np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        T.rows_cross_entropy(x, [0, 1])
    with pytest.raises(DimensionError):
        T.rows_cross_entropy(x, [0, 1, 4])
    with pytest.raises(DomainError):
        T.rows_cross_entropy(x, [0, 1, 2], "median")
