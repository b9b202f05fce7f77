import numpy as np
import pytest

from sure_lab.errors import ContractError, DomainError, ShapeError
from sure_lab.tensor import OP_KINDS, Graph, numeric_gradient, relative_error
from sure_lab.verify import op_gradient_errors


def test_matmul_example():
    g = Graph()
    out = g.matmul(g.constant([[1.0, 2.0], [3.0, 4.0]]), g.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_relu_and_softplus_values():
    g = Graph()
    np.testing.assert_array_equal(g.relu(g.constant([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])
    assert g.softplus(g.constant([0.0])).value[0] == pytest.approx(np.log(2.0), abs=1e-15)


def test_softplus_does_not_overflow():
    g = Graph()
    out = g.softplus(g.constant([1000.0, -1000.0])).value
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1000.0)
    assert out[1] == pytest.approx(0.0, abs=1e-300)


def test_shape_mismatch_names_both_shapes():
    g = Graph()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        g.add(g.constant(np.zeros((2, 3))), g.constant(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        g.matmul(g.constant(np.zeros((2, 3))), g.constant(np.zeros((2, 3))))


def test_log_and_sqrt_reject_non_positive():
    g = Graph()
    with pytest.raises(DomainError):
        g.log(g.constant([1.0, 0.0]))
    with pytest.raises(DomainError):
        g.sqrt(g.constant([-1.0]))
    with pytest.raises(DomainError):
        g.div(g.constant([1.0]), g.constant([0.0]))


def test_backward_square_sum():
    g = Graph()
    x = g.leaf([1.0, 2.0, 3.0])
    root = g.sum(g.square(x))
    np.testing.assert_array_equal(g.grad_wrt(root, x), [2.0, 4.0, 6.0])


def test_softplus_gradient_at_zero():
    g = Graph()
    x = g.leaf(0.0)
    assert g.grad_wrt(g.softplus(x), x) == pytest.approx(0.5)


def test_linear_scalar_gradient():
    g = Graph()
    z = g.leaf(2.0)
    assert float(g.grad_wrt(g.scale(z, 3.0), z)) == 3.0


def test_relu_subgradient_at_zero_is_zero():
    g = Graph()
    x = g.leaf([0.0, 1.0])
    np.testing.assert_array_equal(g.grad_wrt(g.sum(g.relu(x)), x), [0.0, 1.0])


def test_disconnected_leaf_gets_zero_gradient():
    g = Graph()
    x = g.leaf([1.0, 2.0])
    y = g.leaf([[5.0, 6.0]])
    root = g.sum(g.square(x))
    np.testing.assert_array_equal(g.grad_wrt(root, y), np.zeros((1, 2)))


def test_non_scalar_root_rejected():
    g = Graph()
    x = g.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        g.backward(g.square(x))


def test_fan_out_accumulates():
    g = Graph()
    x = g.leaf([1.0, -2.0])
    root = g.sum(g.add(g.mul(x, x), x))
    np.testing.assert_array_equal(g.grad_wrt(root, x), [3.0, -3.0])


def test_tensors_from_another_graph_rejected():
    a, b = Graph(), Graph()
    with pytest.raises(ContractError):
        a.add(a.constant([1.0]), b.constant([1.0]))


def test_constants_receive_no_gradient():
    g = Graph()
    c = g.constant([1.0, 2.0])
    x = g.leaf([3.0, 4.0])
    root = g.sum(g.mul(c, x))
    np.testing.assert_array_equal(g.grad_wrt(root, c), [0.0, 0.0])
    np.testing.assert_array_equal(g.grad_wrt(root, x), [1.0, 2.0])


def test_detach_stops_gradient():
    g = Graph()
    x = g.leaf([1.0, 2.0])
    root = g.sum(g.mul(g.detach(x), x))
    np.testing.assert_array_equal(g.grad_wrt(root, x), [1.0, 2.0])


def test_mean_relu_matches_finite_differences():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(5, 3))

    def f(z: np.ndarray) -> float:
        return float(np.mean(np.maximum(z @ w, 0.0)))

    z0 = rng.normal(size=(2, 5))
    g = Graph()
    z = g.leaf(z0)
    root = g.mean(g.relu(g.matmul(z, g.constant(w))))
    assert relative_error(g.grad_wrt(root, z), numeric_gradient(f, z0)) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_finite_differences(seed: int):
    errors = op_gradient_errors(seed)
    assert set(errors) == set(OP_KINDS)
    for kind, err in errors.items():
        assert err < 1e-6, f"{kind}: relative error {err}"


def test_backward_is_linear():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 3))
    a, b = 2.5, -0.75

    def grads(build):
        g = Graph()
        x = g.leaf(x0)
        return g.grad_wrt(build(g, x), x)

    f = lambda g, x: g.sum(g.square(x))
    h = lambda g, x: g.sum(g.softplus(x))
    combined = grads(lambda g, x: g.add(g.scale(f(g, x), a), g.scale(h(g, x), b)))
    np.testing.assert_allclose(combined, a * grads(f) + b * grads(h), rtol=0, atol=1e-12)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(1)
    x0, w0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def once():
        g = Graph()
        x = g.leaf(x0)
        root = g.mean(g.log_softmax(g.matmul(x, g.constant(w0))))
        return root.value.tobytes(), g.grad_wrt(root, x).tobytes()

    assert once() == once()


def test_repeated_backward_resets_accumulators():
    g = Graph()
    x = g.leaf([1.0, 2.0])
    first = g.sum(g.square(x))
    second = g.sum(g.scale(x, 3.0))
    g.backward(first)
    g.backward(second)
    np.testing.assert_array_equal(g.grad_wrt(second, x), [3.0, 3.0])


def test_op_count_tracks_matmul_and_activations():
    g = Graph()
    x = g.constant(np.ones((2, 3)))
    w = g.constant(np.ones((3, 4)))
    h = g.relu(g.matmul(x, w))
    assert g.op_count == 2 * 3 * 4 + h.value.size


def test_operator_sugar():
    g = Graph()
    x = g.leaf([[1.0, 2.0]])
    y = (x * 2.0 - x) @ g.constant([[1.0], [1.0]])
    assert float(y.value[0, 0]) == 3.0
    assert float((-x)[0, 1].value) == -2.0
