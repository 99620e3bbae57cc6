"""Tests for hinge, rotation and penalty losses and their gradient routing."""

import math

import pytest
import torch

from losses import (
    LossError,
    compose_losses,
    discriminator_loss,
    generator_loss,
    gradient_penalty,
    hinge_d_loss,
    hinge_g_loss,
    rotation_nll,
    minimax_value,
)
from models import DiscriminatorOutput
from numerics import grad_check


def _output(gan, rot):
    return DiscriminatorOutput(gan, rot, [])


def _random_outputs(seed, n=8, rotated=16, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    real = _output(torch.randn(n, generator=g, dtype=dtype), torch.randn(n, 4, generator=g, dtype=dtype))
    fake = _output(torch.randn(n, generator=g, dtype=dtype), torch.randn(n, 4, generator=g, dtype=dtype))
    real_rot = _output(torch.randn(rotated, generator=g, dtype=dtype), torch.randn(rotated, 4, generator=g, dtype=dtype))
    fake_rot = _output(torch.randn(rotated, generator=g, dtype=dtype), torch.randn(rotated, 4, generator=g, dtype=dtype))
    labels = torch.arange(4).repeat(rotated // 4)
    return real, fake, real_rot, fake_rot, labels


def test_value_function_at_equilibrium():
    value = minimax_value(torch.tensor([0.5]), torch.tensor([0.5]))
    assert abs(value.item() - 2 * math.log(0.5)) < 1e-12


def test_value_function_examples():
    exact = minimax_value(torch.tensor([0.9], dtype=torch.float64), torch.tensor([0.1], dtype=torch.float64))
    assert abs(exact.item() - 2 * math.log(0.9)) < 1e-12
    value = minimax_value(torch.tensor([0.7, 0.3]), torch.tensor([0.2, 0.4])).item()
    assert abs(value - (-1.0312)) < 1e-4


def test_value_function_clamps_and_validates():
    assert math.isfinite(minimax_value(torch.tensor([0.0]), torch.tensor([1.0])).item())
    with pytest.raises(LossError):
        minimax_value(torch.tensor([1.5]), torch.tensor([0.5]))


def test_hinge_examples():
    assert hinge_d_loss(torch.tensor([2.0, 0.5]), torch.tensor([-2.0, 0.0])).item() == pytest.approx(0.75)
    assert hinge_g_loss(torch.tensor([-2.0, 0.0])).item() == pytest.approx(1.0)
    assert hinge_d_loss(torch.ones(5), -torch.ones(5)).item() == 0.0


def test_hinge_subgradient():
    real = torch.tensor([0.5, 2.0], requires_grad=True)
    hinge_d_loss(real, torch.tensor([-3.0, -3.0])).backward()
    assert real.grad.tolist() == [-0.5, 0.0]


def test_hinge_rejects_non_finite():
    with pytest.raises(LossError):
        hinge_d_loss(torch.tensor([float("nan")]), torch.zeros(1))


def test_rotation_nll_examples():
    assert rotation_nll(torch.zeros(3, 4), torch.tensor([0, 1, 3])).item() == pytest.approx(math.log(4))
    logits = torch.tensor([[10.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    expected = -math.log(math.exp(10) / (math.exp(10) + 3))
    assert rotation_nll(logits, torch.tensor([0])).item() == pytest.approx(expected, rel=1e-9)


def test_rotation_nll_permutation_symmetry():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 4, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 1, 2])
    perm = torch.tensor([2, 0, 3, 1])
    inverse = torch.argsort(perm)
    assert rotation_nll(logits[:, perm], inverse[labels]).item() == pytest.approx(
        rotation_nll(logits, labels).item(), abs=1e-12)


def test_rotation_nll_validation():
    with pytest.raises(LossError):
        rotation_nll(torch.zeros(2, 4), torch.tensor([0]))
    with pytest.raises(LossError):
        rotation_nll(torch.zeros(2, 4), torch.tensor([0, 4]))
    with pytest.raises(LossError):
        rotation_nll(torch.zeros(2, 3), torch.tensor([0, 1]))


@pytest.mark.parametrize("norm,expected", [(3.0, 40.0), (1.0, 0.0)])
def test_gradient_penalty_linear_critic(norm, expected):
    g = torch.Generator().manual_seed(1)
    w = torch.randn(2 * 4 * 4, generator=g, dtype=torch.float64)
    w = w / w.norm() * norm
    real = torch.randn(5, 2, 4, 4, generator=g, dtype=torch.float64)
    fake = torch.randn(5, 2, 4, 4, generator=g, dtype=torch.float64)
    value = gradient_penalty(lambda x: x.reshape(x.shape[0], -1) @ w, real, fake, 10.0, g)
    assert value.item() == pytest.approx(expected, abs=1e-9)


def test_gradient_penalty_matches_finite_differences():
    """Input-gradient norm of a small smooth convnet checked against central differences."""
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Conv2d(1, 2, 3), torch.nn.Tanh(), torch.nn.Flatten(),
                              torch.nn.Linear(8, 1)).double()

    def critic(x):
        return net(x).squeeze(1)

    real = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    fake = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    value = gradient_penalty(critic, real, fake, 1.0, torch.Generator().manual_seed(3))
    u = torch.rand(1, generator=torch.Generator().manual_seed(3)).double()
    point = (u * real + (1 - u) * fake).reshape(-1)
    eps = 1e-6
    grads = []
    for i in range(point.numel()):
        plus, minus = point.clone(), point.clone()
        plus[i] += eps
        minus[i] -= eps
        grads.append((critic(plus.reshape(1, 1, 4, 4)) - critic(minus.reshape(1, 1, 4, 4))).item() / (2 * eps))
    expected = (torch.tensor(grads).norm().item() - 1.0) ** 2
    assert value.item() == pytest.approx(expected, abs=1e-4)


def test_gradient_penalty_validation():
    with pytest.raises(LossError):
        gradient_penalty(lambda x: x.sum((1, 2, 3)), torch.zeros(2, 1, 2, 2), torch.zeros(3, 1, 2, 2), 1.0)
    with pytest.raises(LossError):
        gradient_penalty(lambda x: x.sum((1, 2, 3)), torch.zeros(2, 1, 2, 2), torch.zeros(2, 1, 2, 2), -1.0)


def test_compose_reduces_to_hinge_without_rotation_weights():
    real, fake, real_rot, fake_rot, labels = _random_outputs(0)
    bundle = compose_losses(real, fake, real_rot, labels, fake_rot, labels, alpha=0.0, beta=0.0)
    assert torch.equal(bundle.d_total, hinge_d_loss(real.gan_logit, fake.gan_logit))
    assert torch.equal(bundle.g_total, hinge_g_loss(fake.gan_logit))


def test_compose_components_recombine():
    real, fake, real_rot, fake_rot, labels = _random_outputs(1)
    bundle = compose_losses(real, fake, real_rot, labels, fake_rot, labels, alpha=0.2, beta=1.0)
    assert abs((bundle.d_gan + 1.0 * bundle.d_rot + bundle.penalty - bundle.d_total).item()) < 1e-12
    assert abs((bundle.g_gan + 0.2 * bundle.g_rot - bundle.g_total).item()) < 1e-12
    assert set(bundle.components()) == {"g_total", "d_total", "g_gan", "g_rot", "d_gan", "d_rot", "penalty"}


def test_compose_routing_isolation():
    """Fake rotated logits never reach d_total and real rotated logits never reach g_total."""
    real, fake, real_rot, fake_rot, labels = _random_outputs(2)
    fake_rot.rot_logits.requires_grad_(True)
    real_rot.rot_logits.requires_grad_(True)
    bundle = compose_losses(real, fake, real_rot, labels, fake_rot, labels)
    d_grads = torch.autograd.grad(bundle.d_total, [fake_rot.rot_logits, real_rot.rot_logits],
                                  allow_unused=True, retain_graph=True)
    g_grads = torch.autograd.grad(bundle.g_total, [fake_rot.rot_logits, real_rot.rot_logits],
                                  allow_unused=True)
    assert d_grads[0] is None and d_grads[1] is not None
    assert g_grads[1] is None and g_grads[0] is not None

    perturbed = _output(fake_rot.gan_logit, fake_rot.rot_logits.detach() * 3.0)
    again = compose_losses(real, fake, real_rot, labels, perturbed, labels)
    assert torch.equal(again.d_total.detach(), bundle.d_total.detach())
    assert not torch.equal(again.g_total.detach(), bundle.g_total.detach())


def test_compose_without_adversarial_term():
    real, fake, real_rot, fake_rot, labels = _random_outputs(3)
    bundle = compose_losses(real, fake, real_rot, labels, fake_rot, labels, adversarial=False)
    assert torch.equal(bundle.d_total, 1.0 * rotation_nll(real_rot.rot_logits, labels) + bundle.penalty)


def test_penalty_excluded_without_adversarial_term():
    real, fake, real_rot, _, labels = _random_outputs(5)
    gan = real.gan_logit.clone().requires_grad_(True)
    penalty = (gan ** 2).sum()
    d_total, _, d_rot, reported = discriminator_loss(gan, fake.gan_logit, real_rot.rot_logits, labels,
                                                     beta=1.0, penalty=penalty, adversarial=False)
    assert torch.equal(d_total, d_rot)
    assert not reported.requires_grad and reported.item() == penalty.item()


def test_missing_rotated_batch_with_positive_weight():
    real, fake, _, _, _ = _random_outputs(4)
    with pytest.raises(LossError):
        discriminator_loss(real.gan_logit, fake.gan_logit, None, None, beta=1.0)
    with pytest.raises(LossError):
        generator_loss(fake.gan_logit, None, None, alpha=0.2)
    g_total, g_gan, g_rot = generator_loss(fake.gan_logit, None, None, alpha=0.0)
    assert g_rot is None and torch.equal(g_total, g_gan)


@pytest.mark.parametrize("seed", range(100))
def test_composed_loss_gradients(seed):
    """Both totals checked against central differences at 64-bit precision."""
    real, fake, real_rot, fake_rot, labels = _random_outputs(seed, n=4, rotated=4)
    # Keep every logit at least 0.1 away from the hinge kinks at +-1.
    def away(t):
        shifted = torch.where((t.abs() - 1).abs() < 0.1, t + 0.3, t)
        return shifted

    packed = torch.cat([away(real.gan_logit), away(fake.gan_logit), real_rot.rot_logits.reshape(-1),
                        fake_rot.rot_logits.reshape(-1)])

    def unpack(v):
        r = _output(v[0:4], None)
        f = _output(v[4:8], None)
        rr = _output(None, v[8:24].reshape(4, 4))
        fr = _output(None, v[24:40].reshape(4, 4))
        return r, f, rr, fr

    def d_total(v):
        r, f, rr, fr = unpack(v)
        return compose_losses(r, f, rr, labels, fr, labels, alpha=0.2, beta=1.0).d_total

    def g_total(v):
        r, f, rr, fr = unpack(v)
        return compose_losses(r, f, rr, labels, fr, labels, alpha=0.2, beta=1.0).g_total

    assert grad_check(d_total, packed) <= 1e-4
    assert grad_check(g_total, packed) <= 1e-4
