import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdiffusion import tensor as tn
from tsdiffusion.gradcheck import check_gradients
from tsdiffusion.tensor import ComplexSpectrum, GradTape, Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def direct_dft(x):
    """O(n^2) DFT by explicit summation; independent of the matrix code path."""
    n = len(x)
    out = []
    for k in range(n // 2 + 1):
        acc = 0j
        for j in range(n):
            acc += x[j] * complex(np.cos(2 * np.pi * k * j / n), -np.sin(2 * np.pi * k * j / n))
        out.append(acc)
    return np.array(out)


# --- matmul ------------------------------------------------------------------


def test_matmul_identity():
    m = np.arange(6.0).reshape(3, 2)
    out = tn.matmul(Tensor(np.eye(3)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_example():
    out = tn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_grad_of_sum_is_ones_times_bT(rng):
    a, b = leaf(rng, 5, 4), leaf(rng, 4, 3)
    with GradTape() as tape:
        y = tn.matmul(a, b).sum()
    ga, gb = tape.gradient(y, [a, b])
    np.testing.assert_allclose(ga, np.ones((5, 3)) @ b.data.T, rtol=1e-12)
    assert check_gradients(lambda: tn.matmul(a, b).sum(), [a, b]) < 1e-4


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_broadcast_grad(rng):
    a, b = leaf(rng, 3, 4, 5), leaf(rng, 5, 2)
    w = rng.normal(size=(3, 4, 2))
    assert check_gradients(lambda: (tn.matmul(a, b) * w).sum(), [a, b]) < 1e-4


# --- layer norm --------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = tn.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_points():
    out = tn.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_gradcheck(rng):
    x, g, b = leaf(rng, 4, 8), leaf(rng, 8), leaf(rng, 8)
    w = rng.normal(size=(4, 8))
    assert check_gradients(lambda: (tn.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


def test_layer_norm_empty_axis():
    with pytest.raises(ValueError):
        tn.layer_norm(Tensor(np.ones((3, 0))))


# --- attention ---------------------------------------------------------------


def test_attention_single_key_returns_value(rng):
    q, k, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    out = tn.softmax_attention(Tensor(q), Tensor(k), Tensor(v), 0.5)
    np.testing.assert_allclose(out.data, v, rtol=1e-14)


def test_attention_identical_keys_average_values(rng):
    q = rng.normal(size=(3, 4))
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 4))
    out = tn.softmax_attention(Tensor(q), Tensor(k), Tensor(v), 0.5)
    np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (3, 1)), rtol=1e-12)


def test_attention_gradcheck_two_heads(rng):
    q, k, v = leaf(rng, 2, 6, 3), leaf(rng, 2, 6, 3), leaf(rng, 2, 6, 3)
    w = rng.normal(size=(2, 6, 3))
    fn = lambda: (tn.softmax_attention(q, k, v, 1 / np.sqrt(3)) * w).sum()
    assert check_gradients(fn, [q, k, v]) < 1e-4


def test_attention_dimension_mismatch():
    with pytest.raises(ValueError):
        tn.softmax_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))), 1.0)


# --- DFT ---------------------------------------------------------------------


def test_rdft_cosine_bin1():
    n = np.arange(8)
    spec = tn.rdft(Tensor(np.cos(2 * np.pi * n / 8)))
    amp = spec.amplitude
    np.testing.assert_allclose(spec.to_complex(), direct_dft(np.cos(2 * np.pi * n / 8)), atol=1e-12)
    assert abs(amp[1] - 4.0) < 1e-12
    np.testing.assert_allclose(np.delete(amp, 1), 0.0, atol=1e-12)


def test_rdft_constant():
    spec = tn.rdft(Tensor(np.full(6, 2.5)))
    assert abs(spec.re.data[0] - 15.0) < 1e-12
    np.testing.assert_allclose(spec.amplitude[1:], 0.0, atol=1e-12)


@pytest.mark.parametrize("n", [2, 7, 8, 15, 24])
def test_rdft_matches_direct_sum(rng, n):
    x = rng.normal(size=n)
    np.testing.assert_allclose(tn.rdft(Tensor(x)).to_complex(), direct_dft(x), atol=1e-10)


def test_parseval_even(rng):
    x = rng.normal(size=16)
    X = direct_dft(x)
    a = np.abs(X) ** 2
    assert np.isclose((x**2).sum(), (a[0] + 2 * a[1:-1].sum() + a[-1]) / 16, rtol=1e-12)
    spec = tn.rdft(Tensor(x))
    b = spec.amplitude**2
    assert np.isclose((x**2).sum(), (b[0] + 2 * b[1:-1].sum() + b[-1]) / 16, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 64), d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_irdft_roundtrip(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    back = tn.irdft(tn.rdft(Tensor(x)), n).data
    assert np.abs(back - x).max() <= 1e-9 * max(np.abs(x).max(), 1.0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 2**31), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_rdft_linear(n, seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, n, 2))
    lhs = tn.rdft(Tensor(a * x + b * y)).to_complex()
    rhs = a * tn.rdft(Tensor(x)).to_complex() + b * tn.rdft(Tensor(y)).to_complex()
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_rdft_rejects_short():
    with pytest.raises(ValueError):
        tn.rdft(Tensor([1.0]))


def test_dft_gradcheck(rng):
    x = leaf(rng, 3, 10, 2)
    wr, wi = rng.normal(size=(2, 3, 6, 2))
    fn = lambda: (tn.rdft(x).re * wr + tn.rdft(x).im * wi).sum()
    assert check_gradients(fn, [x]) < 1e-4
    re, im = leaf(rng, 3, 6, 2), leaf(rng, 3, 6, 2)
    w = rng.normal(size=(3, 10, 2))
    fn2 = lambda: (tn.irdft(ComplexSpectrum(re, im, 10)) * w).sum()
    assert check_gradients(fn2, [re, im]) < 1e-4


# --- other primitives --------------------------------------------------------

UNARY = [tn.square, tn.tabs, tn.exp, tn.sigmoid, tn.tanh, tn.gelu, tn.softplus, tn.neg]


@pytest.mark.parametrize("op", UNARY, ids=lambda f: f.__name__)
def test_unary_gradcheck(rng, op):
    x = Tensor(rng.normal(size=(3, 4)) + 0.05, requires_grad=True)
    w = rng.normal(size=(3, 4))
    assert check_gradients(lambda: (op(x) * w).sum(), [x]) < 1e-4


@pytest.mark.parametrize("op", [tn.add, tn.sub, tn.mul, tn.div])
def test_binary_broadcast_gradcheck(rng, op):
    a = leaf(rng, 2, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)), requires_grad=True)
    w = rng.normal(size=(2, 3, 4))
    assert check_gradients(lambda: (op(a, b) * w).sum(), [a, b]) < 1e-4


def test_shape_ops_gradcheck(rng):
    x = leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3, 2))
    fn = lambda: (tn.transpose(x, (2, 1, 0)) * w).sum() + tn.reshape(x, (6, 4))[1:4, ::2].sum() * 2.0
    assert check_gradients(fn, [x]) < 1e-4
    y = leaf(rng, 2, 2, 4)
    w2 = rng.normal(size=(2, 4))
    fn2 = lambda: (tn.concat([x, y], axis=1).mean(axis=1) * w2).sum()
    assert check_gradients(fn2, [x, y]) < 1e-4


def test_gru_gradcheck(rng):
    x = leaf(rng, 3, 5, 2)
    wi, wh = leaf(rng, 2, 12), leaf(rng, 4, 12)
    bi, bh = leaf(rng, 12), leaf(rng, 12)
    w = rng.normal(size=(3, 5, 4))
    assert check_gradients(lambda: (tn.gru(x, wi, wh, bi, bh) * w).sum(), [x, wi, wh, bi, bh]) < 1e-4


# --- tape semantics ----------------------------------------------------------


def test_unused_input_gets_exact_zero(rng):
    a, b = leaf(rng, 3), leaf(rng, 3)
    with GradTape() as tape:
        y = (a * a).sum()
    ga, gb = tape.gradient(y, [a, b])
    assert np.all(gb == 0.0)
    np.testing.assert_allclose(ga, 2 * a.data)


def test_shared_subexpression_accumulates(rng):
    a = leaf(rng, 4)
    with GradTape() as tape:
        h = a * 3.0
        y = (h * h).sum() + h.sum()
    (g,) = tape.gradient(y, [a])
    np.testing.assert_allclose(g, 18 * a.data + 3.0)


def test_no_tape_means_no_recording(rng):
    a = leaf(rng, 3)
    out = a * 2.0
    assert not out.requires_grad


def test_backward_visits_each_node_once(rng):
    a = leaf(rng, 3)
    calls = []
    with GradTape() as tape:
        y = (a * 2.0).sum()
    nodes = tape._nodes
    tape._nodes = [(o, p, (lambda bw: lambda g: (calls.append(1), bw(g))[1])(bw)) for o, p, bw in nodes]
    tape.gradient(y, [a])
    assert len(calls) == len(nodes)


def test_non_finite_is_an_error():
    with pytest.raises(FloatingPointError):
        tn.div(Tensor([1.0]), Tensor([0.0]))
