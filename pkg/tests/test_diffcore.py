import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from virm import diffcore as dc
from virm.diffcore import Tensor
from virm.errors import ContractError, DegenerateBatchError, DimensionError, LabelIndexError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(x):
    return Tensor(x, requires_grad=True)


# affine --------------------------------------------------------------------------

def test_affine_identity():
    out = dc.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [[1.0, 2.0]]


def test_affine_small_product():
    out = dc.affine(Tensor([[1.0, 0.0]]), Tensor([[2.0, 3.0], [5.0, 7.0]]), Tensor([1.0, 1.0]))
    assert out.data.tolist() == [[3.0, 4.0]]


def test_affine_bias_gradient_is_ones():
    b = param([0.5, -1.0, 2.0])
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4)))
    W = Tensor(np.ones((4, 3)))
    (g,) = dc.backward(dc.affine(x, W, b).sum(), [b])
    assert g.tolist() == [1.0, 1.0, 1.0]


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[4, 2\]"):
        dc.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


def test_affine_without_bias():
    out = dc.affine(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), None)
    assert out.data.tolist() == [[3.0]]


# gelu ----------------------------------------------------------------------------

def test_gelu_zero_and_saturation():
    assert dc.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(dc.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-9


def test_gelu_one_against_high_precision_erf():
    mpmath.mp.dps = 40
    expected = float(mpmath.mpf("0.5") * (1 + mpmath.erf(1 / mpmath.sqrt(2))))
    assert dc.gelu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-15)
    assert round(expected, 6) == 0.841345


@given(arrays(np.float64, 6, elements=finite))
def test_gelu_matches_pointwise_formula(x):
    expected = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(dc.gelu(Tensor(x)).data, expected, rtol=1e-13, atol=1e-15)


# batch norm ----------------------------------------------------------------------

def test_batchnorm_constant_column_is_zero():
    out = dc.batchnorm_train(Tensor(np.full((4, 1), 3.0)), Tensor([1.0]), Tensor([0.0]))
    assert np.all(out.data == 0.0)


def test_batchnorm_already_standard_column():
    out = dc.batchnorm_train(Tensor([[-1.0], [1.0]]), Tensor([1.0]), Tensor([0.0]), eps=0.0)
    assert out.data.ravel().tolist() == [-1.0, 1.0]


def test_batchnorm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    out = dc.batchnorm_train(x, Tensor(np.zeros(3)), Tensor([1.0, 2.0, 3.0]))
    assert np.all(out.data == np.array([1.0, 2.0, 3.0]))


def test_batchnorm_rejects_single_row():
    with pytest.raises(DegenerateBatchError):
        dc.batchnorm_train(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


@settings(max_examples=30)
@given(arrays(np.float64, (8, 3), elements=finite))
def test_batchnorm_standardizes(x):
    x = x + np.arange(8)[:, None] * np.array([1.0, 0.5, 2.0])  # keep columns non-constant
    out = dc.batchnorm_train(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.all(np.abs(out.mean(axis=0)) < 1e-10)
    var = x.var(axis=0)
    np.testing.assert_allclose(out.var(axis=0), var / (var + 1e-5), rtol=1e-10)


# cross-entropy -------------------------------------------------------------------

def test_cross_entropy_uniform_is_log_c():
    for c in (2, 3, 7):
        loss = dc.softmax_cross_entropy(Tensor(np.zeros((4, c))), [0, 1, 0, 1])
        assert loss.item() == pytest.approx(math.log(c), abs=1e-15)
    assert round(dc.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0]).item(), 6) == 0.693147


def test_cross_entropy_small_example():
    expected = -math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
    assert dc.softmax_cross_entropy(Tensor([[1.0, 2.0]]), [1]).item() == pytest.approx(expected, abs=1e-15)
    assert round(expected, 6) == 0.313262


def test_cross_entropy_saturates():
    assert dc.softmax_cross_entropy(Tensor([[0.0, 800.0]]), [1]).item() < 1e-300


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelIndexError):
        dc.softmax_cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])
    with pytest.raises(IndexError):
        dc.softmax_cross_entropy(Tensor(np.zeros((2, 2))), [-1, 0])


@given(arrays(np.float64, (5, 3), elements=st.floats(-50, 50)), st.lists(st.integers(0, 2), min_size=5, max_size=5))
def test_cross_entropy_nonnegative(logits, labels):
    assert dc.softmax_cross_entropy(Tensor(logits), labels).item() >= 0.0


# mse / variance ------------------------------------------------------------------

def test_mse_examples():
    a = Tensor(np.random.default_rng(2).normal(size=(3, 2)))
    assert dc.mse(a, a).item() == 0.0
    assert dc.mse(Tensor([[1.0]]), Tensor([[0.0]])).item() == 0.5
    assert dc.mse(Tensor([[1.0], [1.0]]), Tensor([[0.0], [0.0]])).item() == 0.5


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        dc.mse(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 2))))


def test_population_variance_examples():
    assert dc.population_variance([Tensor(1.0)] * 3).item() == 0.0
    assert dc.population_variance([Tensor(0.2), Tensor(0.4)]).item() == pytest.approx(0.01, abs=1e-15)
    assert dc.population_variance([Tensor(0.0), Tensor(1.0), Tensor(2.0)]).item() == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ContractError):
        dc.population_variance([])


# backward ------------------------------------------------------------------------

def test_backward_mse_scalar():
    p = param([[3.0]])
    (g,) = dc.backward(dc.mse(p, Tensor([[0.0]])), [p])
    assert g.tolist() == [[3.0]]


def test_backward_unreachable_is_zero():
    p, q = param([1.0, 2.0]), param([5.0])
    gp, gq = dc.backward(dc.square(p).sum(), [p, q])
    assert gq.tolist() == [0.0]
    assert gp.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    p = param([1.0, 2.0])
    with pytest.raises(ContractError):
        dc.backward(p * 2.0, [p])


def test_gradient_accumulates_over_uses():
    p = param([2.0])
    loss = (p * p + p * 3.0 + p).sum()
    (g,) = dc.backward(loss, [p])
    assert g.tolist() == [2 * 2.0 + 3.0 + 1.0]


def test_tape_replay_is_reverse_creation_order():
    p = param([1.0])
    a = dc.exp(p)
    b = a * 2.0
    c = dc.log(b) + a
    loss = c.sum()
    tape = dc.Tape(loss)
    seqs = [n._seq for n in tape.replay()]
    assert seqs == sorted(seqs, reverse=True)
    assert tape.replay()[0] is loss


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    W = param(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))

    def l1():
        return dc.softmax_cross_entropy(dc.affine(x, W, None), [0, 1, 1, 0])

    def l2():
        return dc.square(dc.gelu(dc.affine(x, W, None))).sum()

    (g1,), (g2,) = dc.backward(l1(), [W]), dc.backward(l2(), [W])
    (g,) = dc.backward(l1() * 0.7 + l2() * -1.3, [W])
    np.testing.assert_allclose(g, 0.7 * g1 - 1.3 * g2, rtol=0, atol=1e-12)


def test_gradients_stay_finite_on_extreme_logits():
    W = param([[1e3, -1e3]])
    loss = dc.softmax_cross_entropy(dc.affine(Tensor([[5.0], [-5.0]]), W, None), [0, 1])
    (g,) = dc.backward(loss, [W])
    assert np.isfinite(loss.item()) and np.all(np.isfinite(g))


# finite differences --------------------------------------------------------------

def test_finite_diff_linear_and_quadratic():
    assert dc.finite_diff_check(lambda p: (p[0] * 3.0).sum(), [np.array([0.7])]) < 1e-10
    assert dc.finite_diff_check(lambda p: dc.square(p[0]).sum(), [np.array([1.0])]) < 1e-9


def test_gelu_affine_composite_against_finite_differences():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)))

    def f(p):
        return dc.gelu(dc.affine(x, p[0], p[1])).sum()

    assert dc.finite_diff_check(f, [rng.normal(size=(4, 2)), rng.normal(size=2)]) < 1e-4


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "exp": lambda a, b: dc.exp(a).sum(),
    "square": lambda a, b: dc.square(a).sum(),
    "mean": lambda a, b: dc.mean(a * b),
    "gelu": lambda a, b: (dc.gelu(a) * b).sum(),
    "affine": lambda a, b: dc.square(dc.affine(a, b, None)).sum(),
    "batchnorm": lambda a, b: (dc.batchnorm_train(a, Tensor(np.ones(3)), Tensor(np.zeros(3))) * b).sum(),
    "softmax": lambda a, b: (dc.softmax(a) * b).sum(),
    "cross_entropy": lambda a, b: dc.softmax_cross_entropy(a, [0, 2, 1]),
    "mse": lambda a, b: dc.mse(a, b),
    "tile_rows": lambda a, b: (dc.tile_rows(a, 2) * dc.concat_rows([b, b])).sum(),
    "take_rows": lambda a, b: dc.square(dc.take_rows(a, [2, 0, 2])).sum(),
    "variance": lambda a, b: dc.population_variance([a.sum(), b.sum(), (a * b).sum()]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_each_op_passes_finite_differences(name):
    op = OPS[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        assert dc.finite_diff_check(lambda p: op(p[0], p[1]), [a, b]) < 1e-4, (name, seed)


def test_against_reference_autodiff():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(5)
    x_np, W_np, g_np, bt_np = rng.normal(size=(6, 4)), rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=3)
    labels = [0, 1, 2, 0, 1, 2]

    W, gamma, beta = param(W_np), param(g_np), param(bt_np)
    loss = dc.softmax_cross_entropy(dc.gelu(dc.batchnorm_train(dc.affine(Tensor(x_np), W, None), gamma, beta)), labels)
    ours = dc.backward(loss, [W, gamma, beta])

    tW, tg, tb = (torch.tensor(v, dtype=torch.float64, requires_grad=True) for v in (W_np, g_np, bt_np))
    h = torch.tensor(x_np) @ tW
    h = (h - h.mean(0)) / torch.sqrt(h.var(0, unbiased=False) + 1e-5) * tg + tb
    ref = torch.nn.functional.cross_entropy(torch.nn.functional.gelu(h), torch.tensor(labels))
    ref.backward()
    assert loss.item() == pytest.approx(ref.item(), abs=1e-12)
    for mine, theirs in zip(ours, (tW, tg, tb)):
        np.testing.assert_allclose(mine, theirs.grad.numpy(), rtol=1e-9, atol=1e-12)
