"""Numeric kernels shared by the models, losses and metrics.

The differentiable substrate is torch autograd; this module adds the pieces
the training and evaluation code needs on top of it: a finite-difference
gradient checker, a symmetric PSD matrix square root and the power-iteration
estimator behind spectral normalization.
"""

import logging
from typing import Callable, Tuple

import torch

from config import SSGANError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

SYMMETRY_TOLERANCE = 1e-8
PSD_TOLERANCE = 1e-8


class NumericsError(SSGANError):
    """Base class for numeric kernel failures."""


class NonFiniteValueError(NumericsError):
    """Raised when a function evaluation is NaN or infinite."""

    def __init__(self, message: str, coordinate: int):
        super().__init__(message)
        self.coordinate = coordinate


class NotSymmetricError(NumericsError):
    """Raised when a matrix expected to be symmetric is not."""


class NotPSDError(NumericsError):
    """Raised when a matrix has an eigenvalue clearly below zero."""


def precision_dtype(name: str) -> torch.dtype:
    """
    Map a precision name to a torch dtype.

    Args:
        name: "float32" or "float64"

    Returns:
        Corresponding torch dtype

    Raises:
        ValueError: For any other name
    """
    if name == "float32":
        return torch.float32
    if name == "float64":
        return torch.float64
    raise ValueError(f"unknown precision: {name}")


def grad_check(
    scalar_function: Callable[[Tensor], Tensor],
    input: Tensor,
    epsilon: float = 1e-5,
) -> float:
    """
    Compare autograd gradients with central differences.

    The check runs in float64. For every coordinate the central difference
    (f(x+eps*e) - f(x-eps*e)) / (2*eps) is compared with the analytic
    gradient, and the error is scaled by max(1, |central difference|).

    Args:
        scalar_function: Deterministic function returning a scalar tensor
        input: Point at which to check
        epsilon: Finite-difference step (> 0)

    Returns:
        Maximum relative error over all coordinates

    Raises:
        ValueError: If epsilon is not positive
        NonFiniteValueError: If any function evaluation is not finite
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")

    x = input.detach().to(torch.float64).clone().requires_grad_(True)
    value = scalar_function(x)
    if not torch.isfinite(value).all():
        raise NonFiniteValueError("function value is not finite at the input", coordinate=-1)
    analytic = None
    if value.requires_grad:
        (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    base = x.detach().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(base.numel()):
            plus = base.clone()
            plus[i] += epsilon
            minus = base.clone()
            minus[i] -= epsilon
            f_plus = scalar_function(plus.reshape(x.shape))
            f_minus = scalar_function(minus.reshape(x.shape))
            if not (torch.isfinite(f_plus).all() and torch.isfinite(f_minus).all()):
                raise NonFiniteValueError(f"function value is not finite at coordinate {i}", coordinate=i)
            central = (f_plus - f_minus).item() / (2.0 * epsilon)
            error = abs(analytic[i].item() - central) / max(1.0, abs(central))
            worst = max(worst, error)
    return worst


def sqrtm_psd(matrix: Tensor) -> Tensor:
    """
    Square root of a symmetric positive semi-definite matrix.

    Uses a symmetric eigendecomposition, clamps small negative eigenvalues to
    zero and reconstructs with the square-rooted spectrum. Tolerances are
    scaled by max(1, largest magnitude) of the input.

    Args:
        matrix: Square symmetric PSD matrix

    Returns:
        Symmetric PSD matrix S with S @ S == matrix

    Raises:
        NotSymmetricError: If the input is not symmetric within tolerance
        NotPSDError: If an eigenvalue lies below the negative tolerance
    """
    m = matrix.to(torch.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {tuple(m.shape)}")
    scale = max(1.0, torch.linalg.matrix_norm(m).item())
    asymmetry = torch.linalg.matrix_norm(m - m.T).item()
    if asymmetry > SYMMETRY_TOLERANCE * scale:
        raise NotSymmetricError(f"matrix asymmetric by {asymmetry:.3e}")

    eigenvalues, eigenvectors = torch.linalg.eigh((m + m.T) / 2)
    smallest = eigenvalues.min().item() if eigenvalues.numel() else 0.0
    if smallest < -PSD_TOLERANCE * scale:
        raise NotPSDError(f"eigenvalue {smallest:.3e} below zero; covariance estimate is broken")
    roots = eigenvalues.clamp(min=0).sqrt()
    root = (eigenvectors * roots) @ eigenvectors.T
    return (root + root.T) / 2


def _normalize(vector: Tensor) -> Tensor:
    return vector / vector.norm()


def power_iteration_sigma(weight: Tensor, u: Tensor, iters: int = 1) -> Tuple[float, Tensor]:
    """
    Estimate the largest singular value of a matrix.

    Each iteration computes v = normalize(W^T u) and u = normalize(W v); the
    estimate is ||W v||, which never exceeds the Frobenius norm of W.

    Args:
        weight: 2-D matrix (out x in)
        u: Persistent left-singular-vector estimate, length out
        iters: Number of power-iteration steps

    Returns:
        Tuple of (sigma, updated unit vector u)
    """
    w = weight.detach()
    if w.ndim != 2:
        w = w.reshape(w.shape[0], -1)
    if not torch.any(w != 0):
        return 0.0, u
    sigma = 0.0
    for _ in range(iters):
        v = w.T @ u
        if v.norm() == 0:
            break
        v = _normalize(v)
        wv = w @ v
        sigma = wv.norm().item()
        u = _normalize(wv)
    return sigma, u


def singular_vector_v(weight: Tensor, u: Tensor) -> Tensor:
    """Right-singular-vector estimate paired with a persistent u."""
    v = weight.detach().reshape(weight.shape[0], -1).T @ u
    return v / v.norm().clamp(min=1e-12)
