# backend/tests/test_numeric.py
import numpy as np
import pytest

from app.services.numeric import (
    MlpParams,
    Tensor,
    concat,
    cosine_similarity,
    grad_check,
    logsumexp,
    matmul,
    mlp_forward,
    no_grad,
    scatter_add,
    softmax_with_temperature,
    stack,
)
from app.utils.errors import DimensionError, EvaluationError, ParameterError


def _single_layer(w, b, act):
    return MlpParams([Tensor(np.array(w, dtype=float))], [Tensor(np.array(b, dtype=float))], [act])


# --------------------------
# mlp_forward
# --------------------------


def test_mlp_identity_layer():
    """Identity weights and zero bias leave the input untouched"""
    params = _single_layer(np.eye(2), [0.0, 0.0], "identity")
    out = mlp_forward(params, [2.0, 3.0])
    assert np.allclose(out.numpy(), [2.0, 3.0])


def test_mlp_relu_clamps_and_passes():
    """2x + 1 through relu: -3 clamps to 0, 3 gives 7"""
    params = _single_layer([[2.0]], [1.0], "relu")
    assert mlp_forward(params, [-3.0]).numpy().tolist() == [0.0]
    assert mlp_forward(params, [3.0]).numpy().tolist() == [7.0]


def test_mlp_shape_mismatch_reports_both_shapes():
    params = _single_layer(np.eye(2), [0.0, 0.0], "identity")
    with pytest.raises(DimensionError) as exc:
        mlp_forward(params, np.ones((4, 3)))
    assert "(4, 3)" in exc.value.detail
    assert "(2, 2)" in exc.value.detail


def test_mlp_layers_must_compose():
    """A layer whose input size differs from the previous output is rejected"""
    with pytest.raises(DimensionError):
        MlpParams(
            [Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1)))],
            [Tensor(np.zeros(3)), Tensor(np.zeros(1))],
        )


def test_mlp_unknown_activation():
    with pytest.raises(ParameterError):
        _single_layer([[1.0]], [0.0], "tanh")


def test_mlp_gradient(rng):
    params = MlpParams.initialize([3, 4, 2], ["relu", "identity"], rng)
    x = rng.normal(size=(5, 3))
    report = grad_check(lambda t: (mlp_forward(params, t) ** 2).sum(), x)
    assert report.max_rel_err <= 1e-4


# --------------------------
# softmax_with_temperature
# --------------------------


def test_softmax_symmetric_input():
    assert np.allclose(softmax_with_temperature([0.0, 0.0], 1.0).numpy(), [0.5, 0.5])


def test_softmax_closed_form():
    out = softmax_with_temperature([np.log(3.0), 0.0], 1.0).numpy()
    assert np.allclose(out, [0.75, 0.25], atol=1e-12)


def test_softmax_low_temperature_is_one_hot():
    out = softmax_with_temperature([1.0, 0.0], 0.01).numpy()
    assert abs(out[0] - 1.0) < 1e-6
    assert out[1] < 1e-6


def test_softmax_rows_are_distributions(rng):
    out = softmax_with_temperature(rng.normal(scale=30.0, size=(6, 5)), 0.5).numpy()
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_preserves_order(rng):
    x = rng.normal(size=7)
    out = softmax_with_temperature(x, 2.0).numpy()
    assert np.array_equal(np.argsort(x), np.argsort(out))


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(tau):
    with pytest.raises(ParameterError):
        softmax_with_temperature([1.0, 2.0], tau)


# --------------------------
# cosine_similarity
# --------------------------


def test_cosine_examples():
    assert cosine_similarity([1.0, 0.0], [1.0, 0.0]).item() == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(0.0)
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]).item() == pytest.approx(0.7071, abs=1e-4)


def test_cosine_symmetric_and_scale_invariant(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    ab = cosine_similarity(a, b).numpy()
    assert np.allclose(ab, cosine_similarity(b, a).numpy(), atol=1e-12)
    assert np.allclose(ab, cosine_similarity(2.0 * a, b).numpy(), atol=1e-12)
    assert np.all(np.abs(ab) <= 1.0)


def test_cosine_zero_norm_is_zero_without_gradient():
    """A zero vector has similarity 0 and receives no gradient"""
    a = Tensor(np.zeros(3), requires_grad=True)
    out = cosine_similarity(a, [1.0, 2.0, 3.0])
    assert out.item() == 0.0
    out.backward()
    assert np.all(a.grad == 0.0)


def test_cosine_mismatched_extents():
    with pytest.raises(DimensionError):
        cosine_similarity(np.ones(3), np.ones(4))


# --------------------------
# Autodiff plumbing
# --------------------------


def test_backward_accumulates_through_reuse():
    """d/dx of x*x + x at x=3 is 7"""
    x = Tensor(3.0, requires_grad=True)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_composite_ops_gradients(rng):
    """matmul, concat, stack, scatter_add and logsumexp against finite differences"""
    w = rng.normal(size=(3, 2))
    index = np.array([0, 2, 0])

    def f(t):
        m = matmul(t, w)
        joined = concat([m, m * 2.0], axis=1)
        stacked = stack([joined, joined.exp() * 0.1], axis=0)
        pooled = scatter_add(t, index, 3)
        return logsumexp(stacked, axis=-1).sum() + (pooled ** 2).sum()

    report = grad_check(f, rng.normal(size=(4, 3)))
    assert report.max_rel_err <= 1e-4


def test_logsumexp_empty_mask_row_is_zero():
    out = logsumexp(np.ones((2, 3)), mask=np.array([[True, True, False], [False] * 3]))
    assert out.numpy()[0] == pytest.approx(1.0 + np.log(2.0))
    assert out.numpy()[1] == 0.0


# --------------------------
# grad_check
# --------------------------


def test_grad_check_sum_of_squares():
    report = grad_check(lambda t: (t ** 2).sum(), [1.0, 2.0])
    assert np.allclose(report.analytic, [2.0, 4.0])
    assert report.max_rel_err <= 1e-6


def test_grad_check_constant_function():
    report = grad_check(lambda t: Tensor(5.0), [1.0, -1.0, 0.5])
    assert np.all(report.analytic == 0.0)
    assert report.max_rel_err == 0.0


def test_grad_check_non_finite_value():
    with pytest.raises(EvaluationError):
        grad_check(lambda t: t.log().sum(), [-1.0, 1.0])


@pytest.mark.parametrize("eps", [1e-9, 1e-2])
def test_grad_check_eps_range(eps):
    with pytest.raises(ParameterError):
        grad_check(lambda t: t.sum(), [1.0], eps=eps)
