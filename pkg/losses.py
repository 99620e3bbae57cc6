"""Adversarial and self-supervised losses.

Training uses the hinge form of the real/fake game plus the rotation
negative log-likelihood. The discriminator learns rotations from real images
only; the generator is rewarded when its samples' rotations are detectable.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from config import SSGANError

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-7


class LossError(SSGANError):
    """Raised for invalid loss inputs."""


@dataclass
class LossBundle:
    """Totals and components of both players' losses.

    d_total = d_gan + beta * d_rot + penalty (d_gan is dropped when the
    discriminator is trained without the adversarial term) and
    g_total = g_gan + alpha * g_rot.
    """

    g_total: torch.Tensor
    d_total: torch.Tensor
    g_gan: torch.Tensor
    g_rot: Optional[torch.Tensor]
    d_gan: torch.Tensor
    d_rot: Optional[torch.Tensor]
    penalty: torch.Tensor
    alpha: float
    beta: float
    adversarial: bool = True

    def components(self):
        """Scalar view of every component, for logging and finiteness checks."""
        def scalar(t):
            return float("nan") if t is None else float(t.detach())
        return {
            "g_total": scalar(self.g_total),
            "d_total": scalar(self.d_total),
            "g_gan": scalar(self.g_gan),
            "g_rot": scalar(self.g_rot),
            "d_gan": scalar(self.d_gan),
            "d_rot": scalar(self.d_rot),
            "penalty": scalar(self.penalty),
        }


def _require_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise LossError(f"{name} contains non-finite values")


def minimax_value(p_real: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    """
    Classic GAN value: mean log D(real) + mean log(1 - D(fake)).

    Here p is the discriminator's probability that a sample is real. Used for
    analysis only; training runs on the hinge losses.

    Args:
        p_real: Probabilities on real samples
        p_fake: Probabilities on generated samples

    Returns:
        Scalar value

    Raises:
        LossError: If a probability lies outside [0, 1]
    """
    p_real = torch.as_tensor(p_real, dtype=torch.float64)
    p_fake = torch.as_tensor(p_fake, dtype=torch.float64)
    for name, p in (("p_real", p_real), ("p_fake", p_fake)):
        if torch.any(p < 0) or torch.any(p > 1) or not torch.isfinite(p).all():
            raise LossError(f"{name} must lie in [0, 1]")
    p_real = p_real.clamp(PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP)
    p_fake = p_fake.clamp(PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP)
    return torch.log(p_real).mean() + torch.log1p(-p_fake).mean()


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake))."""
    _require_finite("real_logits", real_logits)
    _require_finite("fake_logits", fake_logits)
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """-mean(fake)."""
    _require_finite("fake_logits", fake_logits)
    return -fake_logits.mean()


def rotation_nll(rot_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Mean negative log-likelihood of the applied rotations.

    Args:
        rot_logits: Rotation-head logits (N, 4)
        labels: Rotation labels (N,) in {0, 1, 2, 3}

    Returns:
        Scalar NLL

    Raises:
        LossError: On a length mismatch or a label outside {0..3}
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if rot_logits.ndim != 2 or rot_logits.shape[1] != 4:
        raise LossError(f"rotation logits must be (N, 4), got {tuple(rot_logits.shape)}")
    if labels.shape[0] != rot_logits.shape[0]:
        raise LossError(f"{labels.shape[0]} labels for {rot_logits.shape[0]} logits")
    if labels.numel() and (labels.min() < 0 or labels.max() > 3):
        raise LossError("rotation labels must lie in {0, 1, 2, 3}")
    _require_finite("rot_logits", rot_logits)
    return F.cross_entropy(rot_logits, labels)


def gradient_penalty(
    critic: Callable[[torch.Tensor], Union[torch.Tensor, object]],
    real: torch.Tensor,
    fake: torch.Tensor,
    lam: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Penalize the input-gradient norm of the real/fake logit away from 1.

    Interpolates x = u * real + (1 - u) * fake with u ~ U(0, 1) per sample
    and returns lam * mean((||grad_x logit(x)||_2 - 1)^2). The graph is kept
    so the penalty can be differentiated w.r.t. the critic's parameters.

    Args:
        critic: Maps images to gan logits (or a DiscriminatorOutput)
        real: Real images
        fake: Generated images, same shape
        lam: Penalty strength (>= 0)
        generator: Random stream for the interpolation weights

    Returns:
        Scalar penalty
    """
    if real.shape != fake.shape:
        raise LossError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    if lam < 0:
        raise LossError("lambda must be >= 0")
    u = torch.rand(real.shape[0], generator=generator).to(real.dtype)
    u = u.reshape(-1, *([1] * (real.ndim - 1)))
    mixed = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    out = critic(mixed)
    logits = getattr(out, "gan_logit", out)
    (grads,) = torch.autograd.grad(logits.sum(), mixed, create_graph=True)
    norms = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return lam * ((norms - 1.0) ** 2).mean()


def discriminator_loss(
    real_logits: torch.Tensor,
    fake_logits: torch.Tensor,
    real_rot_logits: Optional[torch.Tensor],
    real_rot_labels: Optional[torch.Tensor],
    beta: float,
    penalty: Optional[torch.Tensor] = None,
    adversarial: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor], torch.Tensor]:
    """
    Discriminator half of the loss.

    Only real rotated images enter the rotation term.

    Returns:
        Tuple of (d_total, d_gan, d_rot, penalty)
    """
    d_gan = hinge_d_loss(real_logits, fake_logits)
    if penalty is None:
        penalty = torch.zeros((), dtype=d_gan.dtype)
    if real_rot_logits is None:
        if beta > 0:
            raise LossError("beta > 0 requires the real rotated batch")
        d_rot = None
        rot_term = torch.zeros((), dtype=d_gan.dtype)
    else:
        d_rot = rotation_nll(real_rot_logits, real_rot_labels)
        rot_term = beta * d_rot
    if adversarial:
        d_total = d_gan + rot_term + penalty
    else:
        d_total = rot_term
        d_gan = d_gan.detach()
        penalty = penalty.detach()
    return d_total, d_gan, d_rot, penalty


def generator_loss(
    fake_logits: torch.Tensor,
    fake_rot_logits: Optional[torch.Tensor],
    fake_rot_labels: Optional[torch.Tensor],
    alpha: float,
) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """
    Generator half of the loss.

    Only generated rotated images enter the rotation term.

    Returns:
        Tuple of (g_total, g_gan, g_rot)
    """
    g_gan = hinge_g_loss(fake_logits)
    if fake_rot_logits is None:
        if alpha > 0:
            raise LossError("alpha > 0 requires the generated rotated batch")
        return g_gan, g_gan, None
    g_rot = rotation_nll(fake_rot_logits, fake_rot_labels)
    return g_gan + alpha * g_rot, g_gan, g_rot


def compose_losses(
    real_upright,
    fake_upright,
    real_rotated=None,
    real_rot_labels: Optional[torch.Tensor] = None,
    fake_rotated=None,
    fake_rot_labels: Optional[torch.Tensor] = None,
    alpha: float = 0.2,
    beta: float = 1.0,
    penalty: Optional[torch.Tensor] = None,
    adversarial: bool = True,
) -> LossBundle:
    """
    Assemble both players' losses from discriminator outputs.

    Each ``*_upright``/``*_rotated`` argument is a DiscriminatorOutput (or
    anything with ``gan_logit``/``rot_logits``). d_total never depends on the
    generated rotated logits and g_total never depends on the real rotated
    logits.

    Args:
        real_upright: Discriminator output on upright real images
        fake_upright: Discriminator output on upright generated images
        real_rotated: Output on the rotated real batch
        real_rot_labels: Its rotation labels
        fake_rotated: Output on the rotated generated batch
        fake_rot_labels: Its rotation labels
        alpha: Generator rotation weight
        beta: Discriminator rotation weight
        penalty: Precomputed regularization term added to d_total
        adversarial: Include the real/fake term in d_total

    Returns:
        LossBundle

    Raises:
        LossError: If a rotated batch is missing while its weight is positive
    """
    d_total, d_gan, d_rot, penalty = discriminator_loss(
        real_upright.gan_logit,
        fake_upright.gan_logit,
        None if real_rotated is None else real_rotated.rot_logits,
        real_rot_labels,
        beta,
        penalty,
        adversarial,
    )
    g_total, g_gan, g_rot = generator_loss(
        fake_upright.gan_logit,
        None if fake_rotated is None else fake_rotated.rot_logits,
        fake_rot_labels,
        alpha,
    )
    return LossBundle(g_total, d_total, g_gan, g_rot, d_gan, d_rot, penalty, alpha, beta, adversarial)
