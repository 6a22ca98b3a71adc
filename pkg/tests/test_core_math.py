import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vldecomp import core_math as cm
from vldecomp.errors import ContractError, DimensionError

from oracles import naive_matmul, softmax64

finite = st.floats(-50, 50, allow_nan=False, width=32)


def t64(x, grad=False):
    return cm.tensor(x, dtype=torch.float64, requires_grad=grad)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity_left():
    B = np.random.default_rng(0).normal(size=(3, 5))
    assert torch.equal(cm.matmul(t64(np.eye(3)), t64(B)), t64(B))


def test_matmul_identity_right():
    out = cm.matmul(cm.tensor([[1, 2], [3, 4]]), cm.tensor([[1, 0], [0, 1]]))
    assert out.tolist() == [[1, 2], [3, 4]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    out = cm.matmul(cm.tensor(a), cm.tensor(b)).numpy()
    np.testing.assert_allclose(out, naive_matmul(a.astype(np.float32), b.astype(np.float32)), atol=1e-6 * 5)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        cm.matmul(cm.tensor(np.ones((2, 3))), cm.tensor(np.ones((4, 2))))


@given(st.integers(0, 10_000))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (t64(rng.normal(size=s)) for s in ((3, 4), (4, 5), (5, 2)))
    left = cm.matmul(cm.matmul(a, b), c)
    right = cm.matmul(a, cm.matmul(b, c))
    np.testing.assert_allclose(left.numpy(), right.numpy(), rtol=1e-4, atol=1e-10)


# -- softmax -----------------------------------------------------------------


def test_softmax_uniform_row():
    out = cm.softmax_rows(cm.tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.numpy(), [[1 / 3] * 3], atol=1e-7)


def test_softmax_large_logit_no_overflow():
    out = cm.softmax_rows(cm.tensor([[1000.0, 0.0]])).numpy()
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0)
    assert out[0, 1] < 1e-30


def test_softmax_matches_float64_reference():
    out = cm.softmax_rows(cm.tensor([[1.0, 2.0, 3.0]])).numpy()[0]
    np.testing.assert_allclose(out, softmax64([1, 2, 3]), rtol=1e-6)


def test_softmax_fully_masked_row_is_zero():
    out = cm.softmax_rows(cm.tensor([[-np.inf, -np.inf]]))
    assert out.tolist() == [[0.0, 0.0]]


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = cm.softmax_rows(cm.tensor(x)).numpy()
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# -- layer norm --------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = cm.layer_norm(cm.tensor([[5.0, 5.0, 5.0]]), cm.tensor([1, 1, 1]), cm.tensor([0, 0, 0]))
    assert out.tolist() == [[0.0, 0.0, 0.0]]


def test_layer_norm_two_values():
    # mean 2, variance 1: (x - 2) / sqrt(1 + eps)
    out = cm.layer_norm(cm.tensor([[1.0, 3.0]]), cm.tensor([1, 1]), cm.tensor([0, 0]), eps=1e-5)
    np.testing.assert_allclose(out.numpy(), [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_zero_gain_gives_bias():
    x = cm.tensor(np.random.default_rng(0).normal(size=(3, 4)))
    bias = cm.tensor([0.5, -1.0, 2.0, 0.0])
    out = cm.layer_norm(x, cm.tensor(np.zeros(4)), bias)
    assert torch.equal(out, bias.expand(3, 4))


def test_layer_norm_rejects_mismatched_gain():
    with pytest.raises(DimensionError):
        cm.layer_norm(cm.tensor(np.ones((2, 3))), cm.tensor(np.ones(4)), cm.tensor(np.zeros(3)))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes(x):
    if np.any(x.std(-1) < 1e-2):
        return
    out = cm.layer_norm(t64(x), t64(np.ones(x.shape[1])), t64(np.zeros(x.shape[1])), eps=1e-12).numpy()
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-5)


# -- other primitives ---------------------------------------------------------


def test_masked_mean_ignores_dropped_slots():
    x = cm.tensor([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]])
    keep = torch.tensor([[True, True, False]])
    assert cm.masked_mean(x, keep).tolist() == [[2.0, 3.0]]


def test_embedding_lookup_out_of_range():
    with pytest.raises(ContractError):
        cm.embedding_lookup(cm.tensor(np.zeros((3, 2))), torch.tensor([3]))


def test_concat_seq_joins_sequence_axis():
    a, b = cm.tensor(np.zeros((1, 2, 3))), cm.tensor(np.ones((1, 4, 3)))
    assert cm.concat_seq([a, b]).shape == (1, 6, 3)


def test_gelu_matches_erf_form():
    xs = [-3.0, -0.5, 0.0, 0.7, 2.5]
    out = cm.gelu(t64(xs)).numpy()
    ref = [0.5 * x * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_cosine_matrix_swap_is_bitwise_transpose():
    rng = np.random.default_rng(3)
    a, b = cm.tensor(rng.normal(size=(5, 7))), cm.tensor(rng.normal(size=(4, 7)))
    assert torch.equal(cm.cosine_matrix(a, b), cm.cosine_matrix(b, a).T)


def test_cosine_matrix_zero_row():
    with pytest.raises(ContractError):
        cm.cosine_matrix(cm.tensor(np.zeros((1, 3))), cm.tensor(np.ones((1, 3))))


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(0).normal(size=(2, 3)), grad=True)
    g = cm.backward(x.sum(), {"x": x})["x"]
    assert torch.equal(g, torch.ones_like(x))


def test_backward_dot_self_gives_2x():
    x = t64([1.0, -2.0, 0.5], grad=True)
    g = cm.backward((x * x).sum(), {"x": x})["x"]
    assert torch.equal(g, 2 * x.detach())


def test_backward_non_scalar_rejected():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        cm.backward(x * 2, {"x": x})


def test_backward_unreached_leaf_gets_zero_gradient():
    x = t64([1.0, 2.0], grad=True)
    y = t64([[3.0]], grad=True)
    g = cm.backward(x.sum(), {"x": x, "y": y})
    assert g["y"].shape == y.shape and not g["y"].any()


# -- finite differences ---------------------------------------------------------


def test_finite_diff_sum_of_squares():
    g = cm.finite_diff_grad(lambda x: float((x**2).sum()), [1.0, 2.0])
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)


def test_finite_diff_constant_is_zero():
    assert not cm.finite_diff_grad(lambda x: 3.0, np.ones((2, 2))).any()


def test_finite_diff_rejects_nonpositive_step():
    with pytest.raises(ContractError):
        cm.finite_diff_grad(lambda x: 0.0, [1.0], h=0)


def test_finite_diff_matches_backward_for_softmax_cross_entropy():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5))
    target = [1, 4, 0]

    def f_np(z):
        z = z - z.max(1, keepdims=True)
        return float(np.mean([-(z[i, t] - np.log(np.exp(z[i]).sum())) for i, t in enumerate(target)]))

    x = t64(logits, grad=True)
    loss = -cm.log(cm.softmax_rows(x))[torch.arange(3), torch.tensor(target)].mean()
    analytic = cm.backward(loss, {"x": x})["x"].numpy()
    numeric = cm.finite_diff_grad(f_np, logits)
    assert cm.grad_mismatch(analytic, numeric, rtol=1e-4) <= 1.0


PRIMITIVES = {
    "matmul": lambda x, c: cm.matmul(x, c["m"]).sum(),
    "add": lambda x, c: (cm.add(x, c["b"]) ** 2).sum(),
    "scale": lambda x, c: (cm.scale(x, 1.7) ** 2).sum(),
    "tanh": lambda x, c: cm.tanh(x).sum(),
    "gelu": lambda x, c: cm.gelu(x).sum(),
    "exp": lambda x, c: cm.exp(x * 0.3).sum(),
    "log": lambda x, c: cm.log(x * x + 1.0).sum(),
    "softmax_rows": lambda x, c: (cm.softmax_rows(x) * c["w"]).sum(),
    "layer_norm": lambda x, c: (cm.layer_norm(x, c["g"], c["bb"], 1e-5) * c["w"]).sum(),
    "masked_mean": lambda x, c: (cm.masked_mean(x[None], c["keep"]) ** 2).sum(),
    "concat_seq": lambda x, c: (cm.concat_seq([x, x * 2]) * c["w2"]).sum(),
    "cosine": lambda x, c: cm.cosine_matrix(x, c["m"].T).sum(),
    "embedding_lookup": lambda x, c: (cm.embedding_lookup(x, c["ids"]) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    consts = {
        "m": t64(rng.normal(size=(4, 3))),
        "b": t64(rng.normal(size=shape)),
        "w": t64(rng.normal(size=shape)),
        "w2": t64(rng.normal(size=(6, 4))),
        "g": t64(rng.normal(size=4)),
        "bb": t64(rng.normal(size=4)),
        "keep": torch.tensor([[True, False, True]]),
        "ids": torch.tensor([0, 2, 2, 1]),
    }
    fn = PRIMITIVES[name]
    x0 = rng.normal(size=shape)
    x = t64(x0, grad=True)
    analytic = cm.backward(fn(x, consts), {"x": x})["x"].numpy()
    numeric = cm.finite_diff_grad(lambda v: fn(t64(v), consts).item(), x0)
    assert cm.grad_mismatch(analytic, numeric, rtol=1e-3) <= 1.0


def test_determinism_bitwise():
    rng = np.random.default_rng(0)
    a, b = cm.tensor(rng.normal(size=(8, 8))), cm.tensor(rng.normal(size=(8, 8)))
    assert torch.equal(cm.softmax_rows(cm.matmul(a, b)), cm.softmax_rows(cm.matmul(a, b)))
