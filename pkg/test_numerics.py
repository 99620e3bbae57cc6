"""Tests for the gradient checker, PSD square root and power iteration."""

import math

import pytest
import torch

from numerics import (
    NonFiniteValueError,
    NotPSDError,
    NotSymmetricError,
    grad_check,
    power_iteration_sigma,
    precision_dtype,
    sqrtm_psd,
)


def test_grad_check_polynomial():
    """Sum of cubes at (1, 2) has an exact analytic gradient."""
    error = grad_check(lambda x: (x ** 3).sum(), torch.tensor([1.0, 2.0]), 1e-5)
    assert error < 1e-6


def test_grad_check_log_sum_exp():
    error = grad_check(lambda x: torch.logsumexp(x, dim=0), torch.tensor([0.5, -1.0, 2.0]))
    assert error <= 1e-6


def test_grad_check_constant_function():
    """A constant has zero gradient on both sides of the comparison."""
    assert grad_check(lambda x: torch.tensor(3.0, dtype=torch.float64), torch.zeros(3)) == 0.0


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            return grad * 3 * x

    assert grad_check(Wrong.apply, torch.tensor([1.0, 2.0])) > 0.1


def test_grad_check_non_finite_reports_coordinate():
    """log hits -inf once the step crosses zero in the second coordinate."""
    with pytest.raises(NonFiniteValueError) as info:
        grad_check(lambda x: torch.log(x).sum(), torch.tensor([1.0, 1e-7]), epsilon=1e-5)
    assert info.value.coordinate == 1


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), torch.ones(2), epsilon=0.0)


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_hinge_composition(seed):
    """Smooth region of a hinge-plus-softmax composite; points kept off the kinks."""
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(6, generator=generator, dtype=torch.float64) * 0.3 + 3.0

    def loss(v):
        return torch.relu(1.0 + v[:3]).mean() - torch.log_softmax(v[3:], dim=0)[0]

    assert grad_check(loss, x) <= 1e-4


def test_sqrtm_of_diagonal():
    root = sqrtm_psd(torch.diag(torch.tensor([4.0, 9.0])))
    assert torch.allclose(root, torch.diag(torch.tensor([2.0, 3.0], dtype=torch.float64)), atol=1e-12)


def test_sqrtm_of_zero_matrix():
    assert torch.equal(sqrtm_psd(torch.zeros(3, 3)), torch.zeros(3, 3, dtype=torch.float64))


def test_sqrtm_squares_back():
    generator = torch.Generator().manual_seed(0)
    a = torch.randn(8, 8, generator=generator, dtype=torch.float64)
    m = a @ a.T
    root = sqrtm_psd(m)
    assert torch.allclose(root @ root, m, atol=1e-8)
    assert torch.allclose(root, root.T)


def test_sqrtm_clamps_tiny_negative_eigenvalue():
    m = torch.diag(torch.tensor([1.0, -1e-12], dtype=torch.float64))
    root = sqrtm_psd(m)
    assert root[1, 1].item() == 0.0


def test_sqrtm_rejects_asymmetric():
    with pytest.raises(NotSymmetricError):
        sqrtm_psd(torch.tensor([[1.0, 0.0], [1.0, 1.0]]))


def test_sqrtm_rejects_negative_definite():
    with pytest.raises(NotPSDError):
        sqrtm_psd(torch.diag(torch.tensor([1.0, -0.5])))


def test_power_iteration_diagonal():
    sigma, u = power_iteration_sigma(torch.diag(torch.tensor([3.0, 1.0])), torch.tensor([1.0, 1.0]) / math.sqrt(2), 50)
    assert abs(sigma - 3.0) < 1e-6
    assert abs(abs(u[0].item()) - 1.0) < 1e-6


def test_power_iteration_zero_matrix():
    u = torch.tensor([1.0, 0.0])
    sigma, new_u = power_iteration_sigma(torch.zeros(2, 2), u)
    assert sigma == 0.0
    assert torch.equal(new_u, u)


def test_power_iteration_bounded_by_frobenius_norm():
    generator = torch.Generator().manual_seed(3)
    w = torch.randn(5, 7, generator=generator)
    u = torch.randn(5, generator=generator)
    sigma, _ = power_iteration_sigma(w, u / u.norm(), 1)
    assert sigma <= torch.linalg.matrix_norm(w).item() + 1e-6


def test_power_iteration_reshapes_conv_kernels():
    generator = torch.Generator().manual_seed(4)
    kernel = torch.randn(4, 3, 3, 3, generator=generator)
    u = torch.randn(4, generator=generator)
    sigma, _ = power_iteration_sigma(kernel, u / u.norm(), 500)
    expected = torch.linalg.matrix_norm(kernel.reshape(4, -1), ord=2).item()
    assert abs(sigma - expected) < 1e-4


def test_precision_dtype():
    assert precision_dtype("float64") is torch.float64
    with pytest.raises(ValueError):
        precision_dtype("float16")
