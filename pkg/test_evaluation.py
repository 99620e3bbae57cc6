"""Tests for FID, embedders, linear probes, curve files and the forgetting harness."""

import logging
import math

import numpy as np
import pytest
import torch

from config import TrainConfig
from data import make_train_test, synthetic_shapes_dataset
from evaluation import (
    Embedder,
    EvaluationError,
    Evaluator,
    ForgettingConfig,
    GaussianMoments,
    ProbeProtocol,
    compute_fid,
    detect_collapse,
    embed_images,
    fid_from_moments,
    forgetting_experiment,
    forgetting_summary,
    gaussian_fit,
    linear_probe,
    pca_embedder,
    probe_over_training,
    read_curve_csv,
    summarize_runs,
    train_classifier_embedder,
    write_curve_csv,
)
from training import run_experiment


def _moments(mu, sigma):
    return GaussianMoments(torch.tensor(mu, dtype=torch.float64), torch.tensor(sigma, dtype=torch.float64), 100)


def test_gaussian_fit_two_points():
    moments = gaussian_fit(torch.tensor([[0.0, 0.0], [2.0, 2.0]]))
    assert moments.mu.tolist() == [1.0, 1.0]
    assert moments.sigma.tolist() == [[2.0, 2.0], [2.0, 2.0]]
    assert moments.n == 2


def test_gaussian_fit_constant_sample():
    assert torch.equal(gaussian_fit(torch.ones(5, 3)).sigma, torch.zeros(3, 3, dtype=torch.float64))


def test_gaussian_fit_matches_numpy_covariance():
    x = torch.randn(1000, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    moments = gaussian_fit(x)
    expected = np.cov(x.numpy(), rowvar=False)
    assert np.abs(moments.sigma.numpy() - expected).max() < 1e-10


def test_gaussian_fit_needs_two_samples():
    with pytest.raises(EvaluationError):
        gaussian_fit(torch.zeros(1, 4))


def test_fid_of_identical_moments():
    moments = gaussian_fit(torch.randn(200, 6, generator=torch.Generator().manual_seed(1)))
    assert fid_from_moments(moments, moments).value < 1e-6


def test_fid_mean_term():
    result = fid_from_moments(_moments([0, 0], [[1, 0], [0, 1]]), _moments([3, 4], [[1, 0], [0, 1]]))
    assert result.value == pytest.approx(25.0, abs=1e-8)
    assert not result.regularized


def test_fid_diagonal_closed_form():
    result = fid_from_moments(_moments([0, 0], [[1, 0], [0, 4]]), _moments([0, 0], [[4, 0], [0, 1]]))
    assert result.value == pytest.approx(2.0, abs=1e-8)


@pytest.mark.parametrize("seed", range(50))
def test_fid_shifted_identity_gaussians(seed):
    g = torch.Generator().manual_seed(seed)
    d = int(torch.randint(1, 17, (1,), generator=g).item())
    mu = torch.randn(d, generator=g, dtype=torch.float64)
    eye = torch.eye(d, dtype=torch.float64)
    value = fid_from_moments(GaussianMoments(torch.zeros(d, dtype=torch.float64), eye, 10),
                             GaussianMoments(mu, eye, 10)).value
    assert abs(value - (mu @ mu).item()) < 1e-8


def test_fid_is_symmetric():
    g = torch.Generator().manual_seed(2)
    a = gaussian_fit(torch.randn(300, 5, generator=g))
    b = gaussian_fit(torch.randn(300, 5, generator=g) * 2 + 1)
    assert abs(fid_from_moments(a, b).value - fid_from_moments(b, a).value) < 1e-8


def test_fid_regularizes_singular_covariance():
    singular = gaussian_fit(torch.ones(10, 3))
    result = fid_from_moments(singular, _moments([0, 0, 0], [[1, 0, 0], [0, 1, 0], [0, 0, 1]]))
    assert result.regularized
    assert result.value >= 0.0


def test_fid_dimension_mismatch():
    with pytest.raises(EvaluationError):
        fid_from_moments(_moments([0], [[1]]), _moments([0, 0], [[1, 0], [0, 1]]))


def test_identity_pca_embeds_raw_pixels():
    images = torch.randn(3, 1, 2, 2, generator=torch.Generator().manual_seed(0))
    embedder = Embedder.pca(torch.eye(4), (1, 2, 2))
    assert torch.equal(embed_images(images, embedder), images.reshape(3, 4).double())


def test_embedding_rejects_wrong_shape():
    with pytest.raises(EvaluationError):
        embed_images(torch.zeros(2, 3, 4, 4), Embedder.pca(torch.eye(4), (1, 2, 2)))


def test_pca_embedder_round_trip(tmp_path):
    dataset = synthetic_shapes_dataset(100, 16)
    embedder = pca_embedder(dataset, 8)
    assert embedder.dim == 8
    embedder.save(tmp_path / "pca.ssgn")
    loaded = Embedder.load(tmp_path / "pca.ssgn")
    assert torch.equal(embed_images(dataset.images, loaded), embed_images(dataset.images, embedder))


def test_classifier_embedder_is_deterministic(tmp_path):
    dataset = synthetic_shapes_dataset(128, 16)
    embedder = train_classifier_embedder(dataset, epochs=1, batch_size=64, width=4)
    first = embed_images(dataset.images, embedder)
    assert torch.equal(first, embed_images(dataset.images, embedder))
    embedder.save(tmp_path / "clf.ssgn")
    assert torch.equal(embed_images(dataset.images, Embedder.load(tmp_path / "clf.ssgn")), first)


def test_compute_fid_warns_on_small_samples(caplog):
    dataset = synthetic_shapes_dataset(100, 16)
    embedder = pca_embedder(dataset, 4)
    with caplog.at_level(logging.WARNING, logger="evaluation"):
        result = compute_fid(dataset, dataset.images, embedder)
    assert result.value < 1e-6
    assert "biased" in caplog.text


def test_evaluator_without_embedder_skips_fid():
    train, test = make_train_test(64, 16, 16)
    config = TrainConfig(image_size=16, channel_scale=0.0625, z_dim=16, batch_size=8, n_rot_base=2,
                         fid_samples=1000, probe_eval=False).validate()
    evaluator = Evaluator(config, train, test, None)
    assert evaluator.fid(None, 1) is None
    assert evaluator.probe(None, 1) is None


def _quick_protocol(**overrides):
    values = dict(epochs=10, seed=0)
    values.update(overrides)
    return ProbeProtocol(**values)


def test_probe_on_one_hot_features():
    g = torch.Generator().manual_seed(0)
    train_y = torch.randint(10, (500,), generator=g)
    test_y = torch.randint(10, (200,), generator=g)
    one_hot = torch.nn.functional.one_hot
    result = linear_probe([one_hot(train_y, 10).double()], train_y, [one_hot(test_y, 10).double()], test_y,
                          _quick_protocol(), num_classes=10)
    assert result.accuracies == [1.0]
    assert result.best_block == 0 and result.best_accuracy == 1.0


def test_probe_on_noise_is_chance():
    g = torch.Generator().manual_seed(1)
    train_y = torch.arange(1000) % 10
    test_y = torch.arange(5000) % 10
    result = linear_probe([torch.randn(1000, 32, generator=g)], train_y,
                          [torch.randn(5000, 32, generator=g)], test_y, _quick_protocol(epochs=5), 10)
    assert abs(result.accuracies[0] - 0.10) <= 0.02


def _informative_features(seed, n, d=16):
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(n) % 4
    centers = torch.randn(4, d, generator=torch.Generator().manual_seed(99))
    return centers[labels] + 1.5 * torch.randn(n, d, generator=g), labels


def test_probe_invariant_to_duplicated_features():
    train_x, train_y = _informative_features(0, 400)
    test_x, test_y = _informative_features(1, 1000)
    base = linear_probe([train_x], train_y, [test_x], test_y, _quick_protocol(), 4).accuracies[0]
    doubled = linear_probe([torch.cat([train_x, train_x], 1)], train_y,
                           [torch.cat([test_x, test_x], 1)], test_y, _quick_protocol(), 4).accuracies[0]
    assert abs(base - doubled) <= 1e-3


def test_probe_invariant_to_feature_permutation():
    train_x, train_y = _informative_features(2, 400)
    test_x, test_y = _informative_features(3, 1000)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(5))
    base = linear_probe([train_x], train_y, [test_x], test_y, _quick_protocol(), 4).accuracies[0]
    permuted = linear_probe([train_x[:, perm]], train_y, [test_x[:, perm]], test_y, _quick_protocol(), 4)
    assert abs(base - permuted.accuracies[0]) <= 2e-3


def test_probe_count_mismatch():
    with pytest.raises(EvaluationError):
        linear_probe([torch.zeros(5, 2)], torch.zeros(4, dtype=torch.long), [torch.zeros(3, 2)],
                     torch.zeros(3, dtype=torch.long))


def test_probe_protocol_schedule():
    protocol = ProbeProtocol()
    assert protocol.lr == pytest.approx(0.05)
    assert protocol.milestones() == [30, 40]
    assert ProbeProtocol(epochs=10).milestones() == [6, 8]


def test_probe_over_training(tmp_path):
    train, test = make_train_test(64, 40, 16)
    config = TrainConfig(image_size=16, channel_scale=0.0625, z_dim=16, batch_size=8, n_rot_base=2,
                         total_steps=2, checkpoint_every=2, log_every=1, fid_samples=1000,
                         probe_eval=False).validate()
    result = run_experiment(config, train, tmp_path / "run")
    protocol = ProbeProtocol(epochs=1)
    rows = probe_over_training(result.checkpoints, config, train, test, protocol, fid_by_step={2: 150.0})
    assert [row["step"] for row in rows] == [0, 2]
    assert [row["kind"] for row in rows] == ["random_init", "trained"]
    assert all(f"probe_block{b}" in rows[0] for b in range(4))
    assert rows[0]["fid"] is None and rows[1]["collapsed"]

    single = probe_over_training(result.checkpoints[-1:], config, train, test, protocol)
    assert len(single) == 1

    path = tmp_path / "curve.csv"
    write_curve_csv(path, rows)
    assert read_curve_csv(path) == rows
    first = path.read_bytes()
    write_curve_csv(path, read_curve_csv(path))
    assert path.read_bytes() == first

    with pytest.raises(EvaluationError):
        probe_over_training([tmp_path / "nope.ssgn"], config, train, test, protocol)


def test_detect_collapse():
    assert detect_collapse([50.0, 40.0, 130.0])
    assert not detect_collapse([50.0, 40.0, 45.0])
    assert detect_collapse([10.0, 31.0])
    assert not detect_collapse([10.0, 25.0], absolute=None)
    assert not detect_collapse([None, 10.0, float("nan")])
    assert not detect_collapse([])


def test_summarize_runs():
    summary = summarize_runs({1: {"fid": 10.0, "acc": 0.5}, 2: {"fid": 14.0, "acc": 0.7}}, "abc")
    assert summary["config_hash"] == "abc" and summary["seeds"] == [1, 2]
    assert summary["metrics"]["fid"]["mean"] == pytest.approx(12.0)
    assert summary["metrics"]["fid"]["std"] == pytest.approx(math.sqrt(8.0))
    assert summary["metrics"]["fid"]["best"] == 10.0
    assert summary["metrics"]["acc"]["best"] == 0.7


def _small_forgetting(**overrides):
    values = dict(period=5, n_tasks=2, cycles=2, batch_size=16, dataset_size=400, eval_per_class=20,
                  n_rot_base=4, width=4)
    values.update(overrides)
    return ForgettingConfig(**values)


def test_forgetting_curve_layout():
    curves = forgetting_experiment(_small_forgetting())
    assert set(curves) == {"vanilla", "self_supervised"}
    curve = curves["vanilla"]
    assert curve.steps == list(range(20))
    assert curve.tasks == ([0] * 5 + [1] * 5) * 2
    assert len(curve.cycle_means) == 2
    assert len(curve.switch_drops) == 3
    assert all(0.0 <= a <= 1.0 for a in curve.accuracies)
    assert curve.rows()[6] == {"step": 6, "task": 1, "accuracy": curve.accuracies[6]}


def test_forgetting_rejects_unknown_variant():
    with pytest.raises(EvaluationError):
        forgetting_experiment(_small_forgetting(), variants=("replay",))


def test_forgetting_summary():
    curves = {seed: forgetting_experiment(_small_forgetting(seed=seed), variants=("vanilla",)) for seed in (0, 1)}
    summary = forgetting_summary(curves)
    assert summary["seeds"] == [0, 1]
    cycles = summary["variants"]["vanilla"]["cycles"]
    assert len(cycles) == 2
    assert cycles[0]["mean"] == pytest.approx(
        (curves[0]["vanilla"].cycle_means[0] + curves[1]["vanilla"].cycle_means[0]) / 2)


@pytest.mark.slow
def test_classifier_embedder_separates_real_from_noise():
    train, test = make_train_test(10000, 10000, 32)
    embedder = train_classifier_embedder(train)
    half_a, half_b = test.split(5000)
    real = compute_fid(half_a, half_b.images, embedder).value
    noise = compute_fid(half_a, torch.rand(5000, 3, 32, 32) * 2 - 1, embedder).value
    assert real * 10 < noise


@pytest.mark.slow
def test_self_supervision_reduces_forgetting():
    curves = {seed: forgetting_experiment(ForgettingConfig(seed=seed)) for seed in (0, 1, 2)}
    summary = forgetting_summary(curves)["variants"]
    vanilla, rotation = summary["vanilla"]["cycles"], summary["self_supervised"]["cycles"]

    assert all(drop > 0 for curve in curves.values() for drop in curve["vanilla"].switch_drops)
    assert abs(vanilla[1]["mean"] - vanilla[0]["mean"]) <= vanilla[0]["std"]

    assert rotation[1]["mean"] > rotation[0]["mean"]
    assert rotation[1]["mean"] > vanilla[1]["mean"]
