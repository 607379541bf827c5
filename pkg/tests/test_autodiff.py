import math

import numpy as np
import pytest

from openset_margin import autodiff as ad
from openset_margin.errors import ConfigValidationError, ContractError, ShapeError


def _weighted_sum(node, weights):
    return ad.sum(ad.mul(node, ad.constant(weights)))


def test_matmul_identity():
    m = ad.constant([[1.5, -2.0], [0.25, 4.0]])
    out = ad.matmul(ad.constant(np.eye(2)), m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_hand_computed():
    out = ad.constant([[1, 2], [3, 4]]) @ ad.constant([[1], [1]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as excinfo:
        ad.matmul(ad.constant(np.ones((3, 4))), ad.constant(np.ones((3, 2))))
    assert '(3, 4)' in str(excinfo.value)
    assert '(3, 2)' in str(excinfo.value)


def test_matmul_gradient(rng, grad_error):
    a = ad.parameter(rng.standard_normal((3, 4)))
    b = ad.parameter(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    assert grad_error(lambda: _weighted_sum(ad.matmul(a, b), w), [a, b]) < 1e-6


def test_relu_leaky_negative_input():
    assert ad.relu_leaky(ad.constant(-1.0), alpha=0.1).item() == pytest.approx(-0.1)


def test_square_derivative_at_three():
    x = ad.parameter(3.0)
    ad.backward(ad.square(x))
    assert x.grad[0, 0] == 6.0


ELEMENTWISE = {
    'log': (ad.log, 'positive'),
    'exp': (ad.exp, 'any'),
    'square': (ad.square, 'any'),
    'sqrt': (ad.sqrt, 'positive'),
    'power': (lambda x: ad.power(x, 1.5), 'positive'),
    'relu_leaky': (lambda x: ad.relu_leaky(x, 0.01), 'any'),
    'clamp_min': (lambda x: ad.clamp_min(x, 0.0), 'any'),
    'softmax_rows': (ad.softmax_rows, 'any'),
    'log_softmax_rows': (ad.log_softmax_rows, 'any'),
    'scale': (lambda x: ad.scale(x, -2.5), 'any'),
    'mean_rows': (lambda x: ad.mean(x, axis=1), 'any'),
}


@pytest.mark.parametrize('name', sorted(ELEMENTWISE))
def test_elementwise_gradients_at_random_points(name, rng, grad_error):
    op, domain = ELEMENTWISE[name]
    values = rng.uniform(0.5, 2.0, size=(4, 5)) if domain == 'positive' else rng.standard_normal((4, 5))
    if domain == 'any':
        # keep kinked ops away from their kink
        values = np.where(np.abs(values) < 0.05, 0.1, values)
    x = ad.parameter(values)
    out = op(x)
    w = rng.standard_normal(out.shape)
    assert grad_error(lambda: _weighted_sum(op(x), w), [x]) < 1e-6


def test_binary_op_gradients_with_broadcast(rng, grad_error):
    a = ad.parameter(rng.uniform(0.5, 2.0, size=(4, 3)))
    row = ad.parameter(rng.uniform(0.5, 2.0, size=(1, 3)))
    col = ad.parameter(rng.uniform(0.5, 2.0, size=(4, 1)))
    w = rng.standard_normal((4, 3))

    def build():
        return _weighted_sum(ad.div(ad.mul(ad.add(a, row), ad.sub(a, col)), row), w)

    assert grad_error(build, [a, row, col]) < 1e-6


def test_take_rows_and_cols_accumulate_repeated_indices(rng):
    x = ad.parameter(rng.standard_normal((3, 4)))
    ad.backward(ad.sum(ad.take_cols(ad.take_rows(x, [0, 0, 2]), [1, 3, 1])))
    expected = np.zeros((3, 4))
    expected[0, [1, 3]] = [4.0, 2.0]
    expected[2, [1, 3]] = [2.0, 1.0]
    np.testing.assert_array_equal(x.grad, expected)


def test_shared_node_gradients_accumulate():
    x = ad.parameter([[2.0, -3.0]])
    ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [[4.0, -6.0]])


def test_log_is_clamped_and_flat_below_eps():
    x = ad.parameter([[0.0, 1.0]])
    out = ad.log(x)
    assert out.data[0, 0] == pytest.approx(math.log(ad.LOG_EPS))
    ad.backward(ad.sum(out))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ad.softmax_rows(ad.constant([[0.0, 0.0, 0.0]])).data, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_large_logits_do_not_overflow():
    out = ad.softmax_rows(ad.constant([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


def test_batch_norm_train_output_is_normalized(rng):
    x = ad.constant(rng.normal(3.0, 2.0, size=(16, 5)))
    gamma, beta = ad.parameter(np.ones((1, 5))), ad.parameter(np.zeros((1, 5)))
    out = ad.batch_norm(x, gamma, beta, ad.BatchNormState.fresh(5), ad.TRAIN)
    var = x.data.var(axis=0)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.var(axis=0), var / (var + 1e-5), atol=1e-9)


def test_batch_norm_running_stats_use_unbiased_variance(rng):
    x = ad.constant(rng.standard_normal((6, 3)))
    state = ad.BatchNormState.fresh(3)
    ad.batch_norm(x, ad.parameter(np.ones((1, 3))), ad.parameter(np.zeros((1, 3))), state, ad.TRAIN)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.data.mean(axis=0, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.data.var(axis=0, ddof=1, keepdims=True),
                               atol=1e-12)


def test_batch_norm_eval_with_fresh_state_is_near_identity(rng):
    x = ad.constant(rng.standard_normal((5, 3)))
    out = ad.batch_norm(x, ad.parameter(np.ones((1, 3))), ad.parameter(np.zeros((1, 3))),
                        ad.BatchNormState.fresh(3), ad.EVAL)
    np.testing.assert_allclose(out.data, x.data, rtol=1e-5)


def test_batch_norm_rejects_single_sample_in_train_mode():
    with pytest.raises(ConfigValidationError):
        ad.batch_norm(ad.constant(np.ones((1, 3))), ad.parameter(np.ones((1, 3))), ad.parameter(np.zeros((1, 3))),
                      ad.BatchNormState.fresh(3), ad.TRAIN)


def test_batch_norm_rejects_unknown_mode():
    with pytest.raises(ConfigValidationError):
        ad.batch_norm(ad.constant(np.ones((2, 3))), ad.parameter(np.ones((1, 3))), ad.parameter(np.zeros((1, 3))),
                      ad.BatchNormState.fresh(3), 'inference')


@pytest.mark.parametrize('mode', [ad.TRAIN, ad.EVAL])
def test_batch_norm_gradients(mode, rng, grad_error):
    x = ad.parameter(rng.standard_normal((6, 3)))
    gamma = ad.parameter(rng.uniform(0.5, 1.5, size=(1, 3)))
    beta = ad.parameter(rng.standard_normal((1, 3)))
    state = ad.BatchNormState(rng.standard_normal((1, 3)), rng.uniform(0.5, 2.0, size=(1, 3)))
    w = rng.standard_normal((6, 3))

    def build():
        return _weighted_sum(ad.batch_norm(x, gamma, beta, state, mode), w)

    assert grad_error(build, [x, gamma, beta]) < 1e-5


def test_grad_reverse_negates_and_scales():
    x = ad.parameter([[1.0, 2.0]])
    out = ad.grad_reverse(x, lam=0.5)
    np.testing.assert_array_equal(out.data, x.data)
    ad.backward(ad.sum(ad.mul(out, ad.constant([[3.0, -4.0]]))))
    np.testing.assert_array_equal(x.grad, [[-1.5, 2.0]])


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ContractError):
        ad.grad_reverse(ad.parameter([[1.0]]), lam=-1.0)


def test_backward_requires_scalar_root():
    with pytest.raises(ContractError):
        ad.backward(ad.parameter(np.ones((2, 2))) * 2.0)


def test_constants_receive_no_gradient():
    c = ad.constant([[1.0, 2.0]])
    x = ad.parameter([[3.0, 4.0]])
    ad.backward(ad.sum(c * x))
    assert not c.requires_grad
    np.testing.assert_array_equal(c.grad, [[0.0, 0.0]])
    np.testing.assert_array_equal(x.grad, [[1.0, 2.0]])


def test_tensor_node_rejects_three_dimensions():
    with pytest.raises(ShapeError):
        ad.TensorNode(np.zeros((2, 2, 2)))
