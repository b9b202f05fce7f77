import numpy as np
import pytest

from sure_lab.errors import ConfigError, ContractError, DomainError
from sure_lab.propagation import UncertaintyRecord, combine, mc_oracle, propagate, sensitivities, sensitivity_drift
from sure_lab.verify import check_decomposition, check_first_order_validity, check_linear_propagation


def linear(weights):
    def predict(graph, latents):
        out = graph.matmul(latents[0], graph.constant(weights[0]))
        for z, w in zip(latents[1:], weights[1:]):
            out = graph.add(out, graph.matmul(z, graph.constant(w)))
        return out

    return predict


def test_nothing_reconstructed_gives_zero():
    z = [np.ones((3, 1))]
    result = propagate(linear([np.array([[3.0]])]), z, [], {})
    np.testing.assert_array_equal(result.sigma2_input, np.zeros(3))
    assert result.sensitivities == {}


def test_scalar_linear_model_is_exact():
    result = propagate(linear([np.array([[3.0]])]), [np.array([[2.0]])], [0], {0: np.array([0.5])})
    assert result.sigma2_input[0] == 4.5
    assert result.sensitivities[0][0] == 9.0


def test_two_inputs_add_their_contributions():
    weights = [np.array([[1.0]]), np.array([[2.0]])]
    latents = [np.array([[0.3]]), np.array([[-1.2]])]
    result = propagate(linear(weights), latents, [0, 1], {0: np.array([1.0]), 1: np.array([1.0])})
    assert result.sigma2_input[0] == pytest.approx(5.0, abs=1e-15)


def test_sensitivity_sums_over_outputs_and_rows_are_independent():
    w = np.array([[1.0, 2.0], [0.0, -1.0]])
    latents = [np.random.default_rng(0).normal(size=(5, 2))]
    sens = sensitivities(linear([w]), latents, [0])
    np.testing.assert_allclose(sens[0], np.full(5, np.sum(w**2)))


def test_ignored_modality_contributes_nothing():
    def predict(graph, latents):
        return graph.scale(latents[0], 2.0)

    latents = [np.ones((2, 1)), np.ones((2, 1))]
    result = propagate(predict, latents, [1], {1: np.array([0.3, 0.7])})
    np.testing.assert_array_equal(result.sigma2_input, [0.0, 0.0])


def test_sensitivity_drift_between_prediction_paths():
    latents = [np.random.default_rng(1).normal(size=(4, 2)), np.ones((4, 1))]
    w = [np.array([[1.0], [2.0]]), np.array([[3.0]])]
    assert sensitivity_drift(linear(w), linear(w), latents, [0, 1]) == 0.0
    # doubling the weights quadruples every squared gradient
    doubled = [2.0 * x for x in w]
    assert sensitivity_drift(linear(w), linear(doubled), latents, [0, 1]) == pytest.approx(3.0)
    assert sensitivity_drift(linear(w), linear(doubled), latents, []) == 0.0
    with pytest.raises(DomainError):
        sensitivity_drift(linear([np.zeros((2, 1)), np.zeros((1, 1))]), linear(w), latents, [0])


def test_reconstructed_index_needs_variance():
    with pytest.raises(ContractError):
        propagate(linear([np.eye(1)]), [np.ones((1, 1))], [0], {})


def test_combine_examples_and_properties():
    assert combine(np.array([4.5]), np.array([0.5]))[0] == 5.0
    v = np.array([0.1, 0.2])
    np.testing.assert_array_equal(combine(np.zeros(2), v), v)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=20), rng.uniform(size=20)
    np.testing.assert_array_equal(combine(a, b), combine(b, a))
    assert np.all(combine(a + 0.1, b) > combine(a, b))
    with pytest.raises(DomainError):
        combine(np.array([-1.0]), np.array([1.0]))


def test_record_enforces_exact_sum():
    UncertaintyRecord(error=np.zeros(1), sigma2_input=np.array([1.0]), sigma2_omega=np.array([2.0]), sigma2_total=np.array([3.0]))
    with pytest.raises(ContractError):
        UncertaintyRecord(
            error=np.zeros(1), sigma2_input=np.array([1.0]), sigma2_omega=np.array([2.0]), sigma2_total=np.array([3.5])
        )


def test_oracle_with_zero_variance_is_zero():
    latents = [np.ones((2, 2))]
    out = mc_oracle(linear([np.ones((2, 1))]), latents, [0], {0: np.zeros(2)}, 1000, seed=0)
    np.testing.assert_array_equal(out, [0.0, 0.0])


def test_oracle_needs_enough_samples():
    with pytest.raises(ConfigError):
        mc_oracle(linear([np.ones((1, 1))]), [np.ones((1, 1))], [0], {0: np.ones(1)}, 999, seed=0)


def test_oracle_matches_linear_propagation():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 1))
    latents = [rng.normal(size=(4, 3))]
    rec_var = {0: np.array([0.1, 0.5, 1.0, 2.0])}
    n = 100_000
    exact = propagate(linear([w]), latents, [0], rec_var).sigma2_input
    oracle = mc_oracle(linear([w]), latents, [0], rec_var, n, seed=5)
    standard_error = exact * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(oracle - exact) < 3 * standard_error)


def test_linear_exactness_sweep():
    assert check_linear_propagation()["passed"]


@pytest.mark.slow
def test_first_order_validity_relu():
    assert check_first_order_validity()["passed"]


def test_first_order_validity_relu_quick():
    assert check_first_order_validity(seeds=3, n_samples=20_000)["passed"]


def test_decomposition_is_exact():
    assert check_decomposition()["passed"]
