import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pblab import tensor as T
from pblab.models import ClassifierModel, ModelConfig

from conftest import max_rel_err, numeric_grad, to_float64

finite = st.floats(-50, 50, allow_nan=False, width=64)


def _grad_check(build, shapes, seed=0, points=5, tol=1e-3):
    """Central-difference check of ``build(*tensors)`` (a scalar) at random points."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        for _ in range(points):
            arrs = [rng.normal(size=s) for s in shapes]
            ts = [T.Tensor(a, requires_grad=True) for a in arrs]
            T.backward(build(*ts))

            def f():
                return build(*[T.Tensor(a) for a in arrs]).item()

            nums = numeric_grad(f, arrs)
            for t, n in zip(ts, nums):
                assert max_rel_err(t.grad, n) < tol


# --- matmul ---


def test_matmul_identity():
    a = T.Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, [[1, 2], [3, 4]])


def test_matmul_selector_row():
    np.testing.assert_array_equal(T.matmul(T.Tensor([[1, 0]]), T.Tensor([[2], [5]])).data, [[2]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    _grad_check(lambda a, b: T.sum(T.square(T.matmul(a, b))), [(3, 4), (4, 2)])


# --- softmax / cross entropy / gelu ---


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_saturates_stably():
    with T.precision(np.float64):
        out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_hand_values():
    # e^k / (e + e^2 + e^3)
    np.testing.assert_allclose(T.softmax(T.Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-4)


def test_softmax_nan_raises():
    with pytest.raises(T.NumericError):
        T.softmax(T.Tensor([np.nan, 1.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(T.Tensor(x.astype(np.float32))).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_cross_entropy_uniform():
    assert T.cross_entropy(T.Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_confident():
    with T.precision(np.float64):
        v = T.cross_entropy(T.Tensor([[10.0, -10.0]]), [0]).item()
    assert v == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert v == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor([[0.0, 1.0]]), [2])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    with T.precision(np.float64):
        z = T.Tensor([[0.3, -1.2, 2.0]], requires_grad=True)
        T.backward(T.cross_entropy(z, [1]))
        expected = T.softmax(T.Tensor([0.3, -1.2, 2.0])).data - np.array([0, 1, 0])
    np.testing.assert_allclose(z.grad[0], expected, atol=1e-12)
    _grad_check(lambda z: T.cross_entropy(z, [1, 0, 2, 2]), [(4, 3)])


def test_gelu_values():
    assert T.gelu(T.Tensor([0.0])).data[0] == 0.0
    assert T.gelu(T.Tensor([10.0])).data[0] == pytest.approx(10.0, abs=1e-4)
    # 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
    assert T.gelu(T.Tensor([1.0])).data[0] == pytest.approx(0.8412, abs=1e-3)


# --- backward ---


def test_backward_square():
    x = T.Tensor([3.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    assert x.grad[0] == pytest.approx(6.0)


def test_backward_product():
    x = T.Tensor([2.0], requires_grad=True)
    y = T.Tensor([5.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, y)))
    assert (x.grad[0], y.grad[0]) == (5.0, 2.0)


def test_backward_needs_scalar_root():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, 2.0))


def test_tape_is_topological():
    x = T.Tensor([[1.0, 2.0]], requires_grad=True)
    y = T.gelu(T.mul(x, 3.0))
    z = T.sum(T.add(y, x))
    tape = T.Tape.record(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_mlp_gradients_match_finite_differences():
    model = to_float64(ClassifierModel.init(ModelConfig(kind="classifier", d=5, h=7, n_classes=3, layers=2, seed=1)))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 3, 6)
    with T.precision(np.float64):
        T.backward(T.cross_entropy(model.forward(x), y))
        analytic = [p.grad.copy() for p in model.parameters()]
        arrays_ = [p.data for p in model.parameters()]
        nums = numeric_grad(lambda: T.cross_entropy(model.forward(x), y).item(), arrays_)
    for a, n in zip(analytic, nums):
        assert max_rel_err(a, n) < 1e-3


OPS = {
    "add": (lambda a, b: T.sum(T.square(T.add(a, b))), [(3, 4), (1, 4)]),
    "sub": (lambda a, b: T.sum(T.square(T.sub(a, b))), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: T.sum(T.mul(a, b)), [(3, 4), (3, 4)]),
    "transpose": (lambda a: T.sum(T.square(T.transpose(a))), [(2, 3)]),
    "reshape": (lambda a: T.sum(T.square(T.reshape(a, (3, 2)))), [(2, 3)]),
    "mean": (lambda a: T.mean(T.square(a)), [(2, 3)]),
    "tanh": (lambda a: T.sum(T.tanh(a)), [(2, 3)]),
    "gelu": (lambda a: T.sum(T.gelu(a)), [(2, 3)]),
    "softmax": (lambda a: T.sum(T.square(T.softmax(a))), [(3, 4)]),
    "log_softmax": (lambda a: T.sum(T.mul(T.log_softmax(a), T.Tensor(np.arange(12.0).reshape(3, 4)))), [(3, 4)]),
    "layer_norm": (lambda x, g, b: T.sum(T.square(T.layer_norm(x, g, b))), [(3, 5), (5,), (5,)]),
    "linear": (lambda x, w, b: T.sum(T.square(T.linear(x, w, b))), [(3, 4), (2, 4), (2,)]),
    "take_rows": (lambda a: T.sum(T.square(T.take_rows(a, [2, 0, 2]))), [(3, 4)]),
    "cols": (lambda a: T.sum(T.square(T.cols(a, 1, 3))), [(3, 4)]),
    "concat_cols": (lambda a, b: T.sum(T.square(T.concat_cols([a, b]))), [(3, 2), (3, 4)]),
    "embedding": (lambda t: T.sum(T.square(T.embedding(t, [1, 1, 3]))), [(4, 3)]),
    "attention": (lambda q, k, v: T.sum(T.square(T.causal_attention(q, k, v, 2, 2))), [(6, 4), (6, 4), (6, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    build, shapes = OPS[name]
    _grad_check(build, shapes, seed=sorted(OPS).index(name))


def test_relu_gradient_away_from_kink():
    with T.precision(np.float64):
        a = np.array([[-1.5, 0.7], [2.0, -0.2]])
        x = T.Tensor(a, requires_grad=True)
        T.backward(T.sum(T.square(T.relu(x))))
        n = numeric_grad(lambda: T.sum(T.square(T.relu(T.Tensor(a)))).item(), [a])[0]
    assert max_rel_err(x.grad, n) < 1e-3


def test_attention_is_causal():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(5, 4)).astype(np.float32) for _ in range(3))
    base = T.causal_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), 1, 2).data
    k2, v2 = k.copy(), v.copy()
    k2[3:] += 5.0
    v2[3:] -= 5.0
    out = T.causal_attention(T.Tensor(q), T.Tensor(k2), T.Tensor(v2), 1, 2).data
    np.testing.assert_array_equal(out[:3], base[:3])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_is_linear_over_independent_graphs(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    with T.precision(np.float64):
        def f(x):
            return T.sum(T.gelu(x))

        def g(y):
            return T.sum(T.square(y))

        x, y = T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True)
        T.backward(T.add(f(x), g(y)))
        x1, y1 = T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True)
        T.backward(f(x1))
        T.backward(g(y1))
    np.testing.assert_allclose(x.grad, x1.grad, atol=1e-12)
    np.testing.assert_allclose(y.grad, y1.grad, atol=1e-12)


def test_rank_limit():
    with pytest.raises(T.ShapeError):
        T.Tensor(np.zeros((2, 2, 2)))


def test_float32_default():
    assert T.Tensor([1.0]).data.dtype == np.float32
    assert T.gelu(T.Tensor([[1.0, 2.0]])).data.dtype == np.float32
