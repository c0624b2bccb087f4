import numpy as np
import pytest

from factored_nmt import tensor as T
from factored_nmt.gradcheck import NumericalError, grad_check
from factored_nmt.tensor import Tensor
from factored_nmt.training import label_smoothed_loss


def test_quadratic_gradient_is_2x():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(20), requires_grad=True)
    report = grad_check(lambda: (x * x).sum(), {"x": x}, eps=1e-5)
    assert report.max_rel_error < 1e-8, str(report)
    # analytic gradient itself is exactly 2x
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_linear_softmax_nll_layer():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((6, 9)), requires_grad=True)
    b = Tensor(rng.standard_normal(9), requires_grad=True)
    x = np.asarray(rng.standard_normal((4, 6)))
    targets = rng.integers(1, 9, size=(4,))

    def f():
        logits = T.matmul(Tensor(x), w) + b
        return label_smoothed_loss(logits.reshape(1, 4, 9), targets.reshape(1, 4), eps=0.0)

    report = grad_check(f, {"w": w, "b": b}, eps=1e-5, tol=1e-4)
    assert report.passed, str(report)


def test_checks_all_coordinates_when_small():
    x = Tensor(np.ones(7), requires_grad=True)
    report = grad_check(lambda: (x * x).sum(), {"x": x})
    assert report.checked == 7


def test_samples_at_least_requested_coordinates():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal(400), requires_grad=True)
    report = grad_check(lambda: (x * x).sum(), {"x": x}, min_total_coords=120)
    assert 120 <= report.checked < 400


def test_nonfinite_function_reported():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(NumericalError):
        grad_check(lambda: T.tlog(x).sum(), {"x": x})


def test_float32_params_rejected():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: (x * x).sum(), {"x": x})


def test_non_scalar_target_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda: x * x, {"x": x})


def test_detects_wrong_gradient():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)

    def wrong():
        out = Tensor(x.data**3, requires_grad=True)
        out._parents = (x,)

        def backward():
            x._accumulate(out.grad * 2.0 * x.data)  # claims d/dx x^3 = 2x

        out._backward = backward
        return out.sum()

    report = grad_check(wrong, {"x": x})
    assert not report.passed
