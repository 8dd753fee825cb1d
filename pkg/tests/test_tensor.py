import math

import numpy as np
import pytest

from wemoe import tensor as T
from wemoe.errors import ContractError, NumericalError, ShapeError
from wemoe.tensor import Tape, Tensor


@pytest.fixture
def f64():
    with T.use_dtype("f64", strict=True):
        yield


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_matmul_hand_reference():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    out = T.matmul(a, b)
    np.testing.assert_allclose(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_batched_matches_loop(f64):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal((4, 5, 2))
    out = T.matmul(Tensor(a), Tensor(b))
    for i in range(4):
        np.testing.assert_allclose(out.data[i], a[i] @ b[i], rtol=1e-12)


def test_softmax_symmetry():
    out = T.softmax_lastdim(Tensor([0.0, 0.0]).reshape(1, 2))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)


def test_softmax_closed_form(f64):
    out = T.softmax_lastdim(Tensor([math.log(2.0), 0.0]).reshape(1, 2))
    np.testing.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], rtol=1e-12)


def test_softmax_saturation(f64):
    out = T.softmax_lastdim(Tensor([1000.0, 0.0]).reshape(1, 2))
    np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)


def test_softmax_rows_sum_to_one(f64):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((6, 9)) * 5)
    out = T.softmax_lastdim(x)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)


def test_layer_norm_constant_vector_is_zero(f64):
    x = Tensor(np.full((3, 4), 7.0))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
    np.testing.assert_allclose(out.data, np.zeros((3, 4)), atol=1e-6)


def test_layer_norm_already_normalized(f64):
    x = Tensor([[1.0, -1.0]])
    out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_zero_gamma_collapses_to_beta(f64):
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((5, 8)))
    beta = rng.standard_normal(8)
    out = T.layer_norm(x, Tensor(np.zeros(8)), Tensor(beta), eps=1e-5)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta, (5, 8)), rtol=1e-12)


def test_layer_norm_zero_mean(f64):
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 16)) * 3)
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-10)
    assert np.all(np.abs(out.data.mean(axis=-1)) <= 1e-6)


def test_gelu_relu_point_values(f64):
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert T.relu(Tensor([-3.0])).data[0] == 0.0
    assert T.relu(Tensor([3.0])).data[0] == 3.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_backward_sum_gives_ones(f64):
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x].data, np.ones((2, 3)))


def test_backward_quadratic_identity(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x) * 0.5
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x].data, [1.0, 2.0], rtol=1e-12)


def test_backward_rejects_nonscalar_loss(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_unreachable_leaf_gets_zero(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        _unused = y * 2.0
        loss = T.tsum(x * x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[y].data, [0.0])


def _composite(x: Tensor) -> Tensor:
    h = T.matmul(x, Tensor(_W1))
    h = T.gelu(h + Tensor(_B1))
    h = T.layer_norm(h, Tensor(_G), Tensor(_B), eps=1e-5)
    h = T.relu(T.matmul(h, Tensor(_W2)))
    p = T.softmax_lastdim(h)
    return T.tsum(T.log(T.clamp_min(p, 1e-12)) * Tensor(_MASK)) * (1.0 / 7.0)


_rng = np.random.default_rng(7)
_W1 = _rng.standard_normal((6, 5))
_B1 = _rng.standard_normal(5)
_G = _rng.standard_normal(5) + 1.0
_B = _rng.standard_normal(5)
_W2 = _rng.standard_normal((5, 4))
_MASK = _rng.standard_normal((3, 4))


def test_backward_matches_finite_differences_on_composite(f64):
    x = Tensor(_rng.standard_normal((3, 6)), requires_grad=True)
    with Tape() as tape:
        loss = _composite(x)
    analytic = tape.backward(loss)[x].data
    numeric = T.finite_diff_grad(_composite, x, h=1e-6).data
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences_random_ops(f64, seed):
    # property: every differentiable primitive agrees with central differences
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((8, 8))
    v = rng.standard_normal((4, 8))

    def f(x: Tensor) -> Tensor:
        a = T.matmul(x, Tensor(w))
        b = T.concat([a, T.gelu(a)], axis=1)
        c = T.slice_axis(b, 1, 3, 11)
        d = T.layer_norm(c, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-6)
        e = d * Tensor(v) + T.exp(T.tmean(d, axis=1, keepdims=True) * 0.1)
        return T.tmean(e * e)

    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
    analytic = tape.backward(loss)[x].data
    numeric = T.finite_diff_grad(f, x, h=1e-6).data
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_finite_diff_sum_is_ones(f64):
    x = Tensor(np.array([0.3, -1.2, 4.0]))
    g = T.finite_diff_grad(lambda t: T.tsum(t), x, h=1e-5)
    np.testing.assert_allclose(g.data, np.ones(3), atol=1e-9)


def test_finite_diff_square_at_three(f64):
    g = T.finite_diff_grad(lambda t: T.tsum(t * t), Tensor([3.0]), h=1e-4)
    assert abs(g.data[0] - 6.0) < 1e-6


def test_tape_replay_determinism(f64):
    rng = np.random.default_rng(11)
    w = rng.standard_normal((5, 5))
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)

    def run():
        with Tape() as tape:
            loss = T.tsum(T.softmax_lastdim(T.matmul(x, Tensor(w))) * Tensor(w[:3]))
        return tape.backward(loss)[x].data

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_strict_mode_raises_on_overflow():
    with T.use_dtype("f32", strict=True):
        with pytest.raises(NumericalError):
            T.exp(Tensor([1000.0]))


def test_shared_input_accumulates_gradient(f64):
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x + x * 3.0)
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x].data, [7.0], rtol=1e-12)


def test_broadcast_add_gradients(f64):
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    x = Tensor(np.ones((4, 3)))
    with Tape() as tape:
        loss = T.tsum((x + b) * 2.0)
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[b].data, [8.0, 8.0, 8.0])


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(ContractError):
            with Tape():
                pass


def test_default_dtype_switch():
    T.set_default_dtype("f64")
    try:
        assert Tensor([1.0]).data.dtype == np.float64
    finally:
        T.set_default_dtype("f32")
    assert Tensor([1.0]).data.dtype == np.float32
