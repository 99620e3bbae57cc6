"""Sample-quality, representation and forgetting measurements.

FID fits Gaussians to embedded real and generated samples and compares them
with the Frechet distance. Representation quality is measured with linear
probes on the pooled features of every discriminator block. The forgetting
harness trains classifiers on a cycling sequence of 1-vs-all tasks, with and
without an auxiliary rotation loss.
"""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import SSGANError, TrainConfig
from data import (
    ImageBatch,
    ImageDataset,
    make_rotation_batch,
    nonstationary_task_stream,
    stream_generator,
    synthetic_shapes_dataset,
    task_for_step,
)
from losses import rotation_nll
from models import (
    Discriminator,
    Generator,
    build_models,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_named_state,
    named_state,
    sample_latent,
)
from numerics import sqrtm_psd

logger = logging.getLogger(__name__)

COVARIANCE_EPSILON = 1e-6
SINGULAR_TOLERANCE = 1e-12
COLLAPSE_FACTOR = 3.0
COLLAPSE_FID = 100.0
RECOMMENDED_FID_SAMPLES = 10000


class EvaluationError(SSGANError):
    """Raised for invalid evaluation inputs."""


@dataclass
class GaussianMoments:
    """Mean and covariance of an embedded sample set."""

    mu: torch.Tensor
    sigma: torch.Tensor
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class FIDResult:
    """FID value plus whether the covariances had to be regularized."""

    value: float
    regularized: bool = False

    def __float__(self) -> float:
        return self.value


def gaussian_fit(embeddings: torch.Tensor) -> GaussianMoments:
    """
    Fit a multivariate Gaussian to row samples.

    Args:
        embeddings: (n, d) samples, n >= 2

    Returns:
        GaussianMoments with unbiased (n - 1) covariance, symmetrized

    Raises:
        EvaluationError: If fewer than two samples are given
    """
    x = torch.as_tensor(embeddings).to(torch.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EvaluationError(f"need an (n >= 2, d) sample, got shape {tuple(x.shape)}")
    mu = x.mean(dim=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return GaussianMoments(mu, (sigma + sigma.T) / 2, x.shape[0])


def _is_singular(sigma: torch.Tensor) -> bool:
    eigenvalues = torch.linalg.eigvalsh(sigma)
    scale = max(1.0, eigenvalues.abs().max().item())
    return eigenvalues.min().item() <= SINGULAR_TOLERANCE * scale


def fid_from_moments(a: GaussianMoments, b: GaussianMoments) -> FIDResult:
    """
    Frechet distance between two Gaussians.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the root taken
    of the symmetric form S_a^(1/2) S_b S_a^(1/2). When either covariance is
    singular, eps * I is added to both and the result is flagged.

    Args:
        a: First moments
        b: Second moments (same dimension and embedder)

    Returns:
        FIDResult, clamped at zero

    Raises:
        EvaluationError: On a dimension mismatch
    """
    if a.dim != b.dim:
        raise EvaluationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    sigma_a = a.sigma.to(torch.float64)
    sigma_b = b.sigma.to(torch.float64)
    regularized = _is_singular(sigma_a) or _is_singular(sigma_b)
    if regularized:
        eye = torch.eye(a.dim, dtype=torch.float64) * COVARIANCE_EPSILON
        sigma_a, sigma_b = sigma_a + eye, sigma_b + eye
        logger.warning("singular covariance; added %.0e*I to both moment sets", COVARIANCE_EPSILON)

    root_a = sqrtm_psd(sigma_a)
    product = root_a @ sigma_b @ root_a
    cross = sqrtm_psd((product + product.T) / 2)
    diff = a.mu.to(torch.float64) - b.mu.to(torch.float64)
    value = (diff @ diff + torch.trace(sigma_a) + torch.trace(sigma_b) - 2 * torch.trace(cross)).item()
    if value < -1e-6:
        logger.warning("FID %.3e below zero beyond rounding", value)
    return FIDResult(max(0.0, value), regularized)


class EmbedderNet(nn.Module):
    """Small convolutional classifier whose penultimate layer embeds images."""

    def __init__(self, channels: int, num_classes: int, width: int = 32, embed_dim: int = 128):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, embed_dim), nn.ReLU(),
        )
        self.classifier = nn.Linear(embed_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


class Embedder:
    """Fixed image embedding shared by both sides of an FID comparison."""

    KINDS = ("frozen_classifier", "pca_pixels")

    def __init__(self, kind: str, input_shape: Tuple[int, int, int],
                 network: Optional[EmbedderNet] = None,
                 mean: Optional[torch.Tensor] = None, basis: Optional[torch.Tensor] = None):
        if kind not in self.KINDS:
            raise EvaluationError(f"unknown embedder kind: {kind}")
        self.kind = kind
        self.input_shape = tuple(input_shape)
        self.network = network.eval() if network is not None else None
        self.mean = mean
        self.basis = basis

    @property
    def dim(self) -> int:
        if self.kind == "pca_pixels":
            return self.basis.shape[1]
        return self.network.classifier.in_features

    @classmethod
    def pca(cls, basis: torch.Tensor, input_shape: Tuple[int, int, int],
            mean: Optional[torch.Tensor] = None) -> "Embedder":
        basis = basis.to(torch.float64)
        if mean is None:
            mean = torch.zeros(basis.shape[0], dtype=torch.float64)
        return cls("pca_pixels", input_shape, mean=mean.to(torch.float64), basis=basis)

    def state(self) -> Dict[str, torch.Tensor]:
        meta = torch.tensor([self.KINDS.index(self.kind), *self.input_shape], dtype=torch.int64)
        tensors = {"embedder/meta": meta}
        if self.kind == "pca_pixels":
            tensors["pca/mean"] = self.mean
            tensors["pca/basis"] = self.basis
        else:
            net = self.network
            tensors["embedder/dims"] = torch.tensor(
                [net.classifier.out_features, net.features[0].out_channels, net.classifier.in_features],
                dtype=torch.int64,
            )
            tensors.update(named_state(net, "net"))
        return tensors

    def save(self, path: Union[str, Path]) -> None:
        # Readers may poll for the file while it is written.
        path = Path(path)
        partial = path.with_name(f"{path.name}.{os.getpid()}.part")
        partial.write_bytes(encode_checkpoint(self.state()))
        os.replace(partial, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Embedder":
        tensors = decode_checkpoint(Path(path).read_bytes())
        if "embedder/meta" not in tensors:
            raise EvaluationError(f"{path} is not an embedder checkpoint")
        kind_index, c, h, w = tensors["embedder/meta"].tolist()
        kind = cls.KINDS[kind_index]
        if kind == "pca_pixels":
            return cls.pca(tensors["pca/basis"], (c, h, w), tensors["pca/mean"])
        num_classes, width, embed_dim = tensors["embedder/dims"].tolist()
        net = EmbedderNet(c, num_classes, width, embed_dim)
        load_named_state(net, "net", tensors)
        return cls(kind, (c, h, w), network=net)


def embed_images(images: Union[ImageBatch, torch.Tensor], embedder: Embedder,
                 chunk: int = 500) -> torch.Tensor:
    """
    Embed images with a frozen embedder.

    Args:
        images: Batch or (n, C, H, W) tensor
        embedder: Frozen embedder
        chunk: Images per forward pass

    Returns:
        (n, d) float64 embeddings

    Raises:
        EvaluationError: If the image shape does not match the embedder
    """
    x = images.images if isinstance(images, ImageBatch) else images
    if tuple(x.shape[1:]) != embedder.input_shape:
        raise EvaluationError(
            f"embedder expects {embedder.input_shape} images, got {tuple(x.shape[1:])}"
        )
    if embedder.kind == "pca_pixels":
        flat = x.reshape(x.shape[0], -1).to(torch.float64)
        return (flat - embedder.mean) @ embedder.basis
    outputs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], chunk):
            batch = x[start:start + chunk].to(torch.float32)
            outputs.append(embedder.network.features(batch).to(torch.float64))
    return torch.cat(outputs)


def pca_embedder(dataset: ImageDataset, dim: int = 64) -> Embedder:
    """
    PCA basis of flattened pixels.

    Args:
        dataset: Images to fit the basis on
        dim: Number of components kept

    Returns:
        pca_pixels Embedder
    """
    flat = dataset.images.reshape(len(dataset), -1).to(torch.float64)
    mean = flat.mean(dim=0)
    _, _, vh = torch.linalg.svd(flat - mean, full_matrices=False)
    dim = min(dim, vh.shape[0])
    return Embedder.pca(vh[:dim].T.contiguous(), tuple(dataset.images.shape[1:]), mean)


def train_classifier_embedder(dataset: ImageDataset, epochs: int = 10, batch_size: int = 128,
                              lr: float = 1e-3, seed: int = 0, width: int = 32) -> Embedder:
    """
    Train the small classifier whose penultimate layer serves as embedding.

    Args:
        dataset: Labeled training images
        epochs: Passes over the data
        batch_size: Minibatch size
        lr: Adam learning rate
        seed: Initialization and shuffling seed
        width: Base channel width

    Returns:
        frozen_classifier Embedder
    """
    if dataset.labels is None:
        raise EvaluationError("classifier embedder needs a labeled dataset")
    torch.manual_seed(seed)
    net = EmbedderNet(dataset.channels, dataset.num_classes, width)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    for epoch in range(epochs):
        order = torch.randperm(len(dataset), generator=stream_generator(seed, "embedder", epoch))
        correct = 0
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(order[start:start + batch_size])
            logits = net(batch.images)
            loss = F.cross_entropy(logits, batch.labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            correct += (logits.argmax(1) == batch.labels).sum().item()
        logger.info("embedder epoch %d: train accuracy %.4f", epoch + 1, correct / len(dataset))
    return Embedder("frozen_classifier", tuple(dataset.images.shape[1:]), network=net)


def classifier_accuracy(embedder: Embedder, dataset: ImageDataset) -> float:
    """Top-1 accuracy of a frozen_classifier embedder's own head."""
    with torch.no_grad():
        logits = embedder.network(dataset.images)
    return (logits.argmax(1) == dataset.labels).double().mean().item()


def dataset_moments(dataset: Union[ImageDataset, torch.Tensor], embedder: Embedder) -> GaussianMoments:
    images = dataset.images if isinstance(dataset, ImageDataset) else dataset
    return gaussian_fit(embed_images(images, embedder))


def generated_images(gen: Generator, n: int, seed: int, num_classes: int = 0,
                     chunk: int = 500) -> torch.Tensor:
    """
    Draw n samples from a generator without touching its parameters.

    Args:
        gen: Generator (its parameters are read only)
        n: Number of images
        seed: Sampling seed
        num_classes: Classes to condition on (conditional generators)
        chunk: Samples per forward pass

    Returns:
        (n, C, H, W) float32 images
    """
    dtype = next(gen.parameters()).dtype
    outputs = []
    with torch.no_grad():
        for index, start in enumerate(range(0, n, chunk)):
            size = min(chunk, n - start)
            z = sample_latent(size, gen.z_dim, stream_generator(seed, "eval_z", index), dtype)
            labels = None
            if gen.mode == "conditional_bn":
                labels = torch.randint(num_classes, (size,), generator=stream_generator(seed, "eval_y", index))
            outputs.append(gen(z, labels).to(torch.float32))
    return torch.cat(outputs)


def compute_fid(real: Union[ImageDataset, torch.Tensor], fake: torch.Tensor, embedder: Embedder) -> FIDResult:
    """FID between a real image set and generated images under one embedder."""
    if fake.shape[0] < RECOMMENDED_FID_SAMPLES:
        logger.warning("FID on %d generated samples is biased upwards (recommended %d)",
                       fake.shape[0], RECOMMENDED_FID_SAMPLES)
    return fid_from_moments(dataset_moments(real, embedder), gaussian_fit(embed_images(fake, embedder)))


@dataclass
class ProbeProtocol:
    """Linear-probe training schedule.

    Learning rate is 0.1 * batch_size / 256, decayed by 10x after 60% and 80%
    of the epochs (epochs 30 and 40 of 50). Resize/crop augmentation is only
    meaningful for large images and is off for 32px inputs.
    """

    batch_size: int = 128
    base_lr: float = 0.1
    epochs: int = 50
    decay_epochs: Tuple[int, ...] = (30, 40)
    decay_factor: float = 0.1
    reference_epochs: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0
    resize_augmentation: bool = False
    seed: int = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def milestones(self) -> List[int]:
        """Decay epochs scaled to the configured number of epochs."""
        scale = self.epochs / self.reference_epochs
        return sorted({max(1, int(round(e * scale))) for e in self.decay_epochs})


@dataclass
class ProbeResult:
    accuracies: List[float]
    best_block: int
    best_accuracy: float

    def row(self) -> Dict[str, float]:
        values = {f"probe_block{i}": acc for i, acc in enumerate(self.accuracies)}
        values["best"] = self.best_accuracy
        return values


def _standardize(train: torch.Tensor, test: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    mean = train.mean(dim=0)
    std = train.std(dim=0, unbiased=False)
    std = torch.where(std > 1e-8, std, torch.ones_like(std))
    scale = math.sqrt(train.shape[1])
    return (train - mean) / std / scale, (test - mean) / std / scale


def _probe_block(train_x: torch.Tensor, train_y: torch.Tensor, test_x: torch.Tensor,
                 test_y: torch.Tensor, num_classes: int, protocol: ProbeProtocol) -> float:
    train_x, test_x = _standardize(train_x.to(torch.float64), test_x.to(torch.float64))
    model = nn.Linear(train_x.shape[1], num_classes).to(torch.float64)
    nn.init.zeros_(model.weight)
    nn.init.zeros_(model.bias)
    optimizer = torch.optim.SGD(model.parameters(), lr=protocol.lr, momentum=protocol.momentum,
                                weight_decay=protocol.weight_decay)
    schedule = torch.optim.lr_scheduler.MultiStepLR(optimizer, protocol.milestones(), protocol.decay_factor)
    shuffler = torch.Generator().manual_seed(protocol.seed)
    for _ in range(protocol.epochs):
        order = torch.randperm(train_x.shape[0], generator=shuffler)
        for start in range(0, train_x.shape[0], protocol.batch_size):
            index = order[start:start + protocol.batch_size]
            loss = F.cross_entropy(model(train_x[index]), train_y[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        schedule.step()
    with torch.no_grad():
        predictions = model(test_x).argmax(dim=1)
    return (predictions == test_y).double().mean().item()


def linear_probe(
    train_features: Sequence[torch.Tensor],
    train_labels: torch.Tensor,
    test_features: Sequence[torch.Tensor],
    test_labels: torch.Tensor,
    protocol: Optional[ProbeProtocol] = None,
    num_classes: Optional[int] = None,
) -> ProbeResult:
    """
    Multinomial logistic regression on frozen features, one probe per block.

    Features are standardized with training statistics and scaled by
    1/sqrt(d); weights start at zero. Under these conventions the result does
    not depend on the order of feature dimensions or on duplicating them.

    Args:
        train_features: Per-block (n_train, d_b) features
        train_labels: (n_train,) class labels
        test_features: Per-block (n_test, d_b) features
        test_labels: (n_test,) class labels
        protocol: Training schedule
        num_classes: Number of classes (inferred from labels when None)

    Returns:
        ProbeResult with per-block test top-1 and the best block

    Raises:
        EvaluationError: On label/feature count mismatches
    """
    protocol = protocol or ProbeProtocol()
    if len(train_features) != len(test_features) or not train_features:
        raise EvaluationError("train and test need the same, non-zero number of blocks")
    train_labels = torch.as_tensor(train_labels, dtype=torch.long)
    test_labels = torch.as_tensor(test_labels, dtype=torch.long)
    if num_classes is None:
        num_classes = int(max(train_labels.max(), test_labels.max()).item()) + 1
    accuracies = []
    for block, (train_x, test_x) in enumerate(zip(train_features, test_features)):
        if train_x.shape[0] != train_labels.shape[0] or test_x.shape[0] != test_labels.shape[0]:
            raise EvaluationError(f"block {block}: feature count does not match label count")
        if train_x.shape[1] != test_x.shape[1]:
            raise EvaluationError(f"block {block}: train/test feature widths differ")
        accuracies.append(_probe_block(train_x, train_labels, test_x, test_labels, num_classes, protocol))
    best = max(range(len(accuracies)), key=lambda i: accuracies[i])
    return ProbeResult(accuracies, best, accuracies[best])


def extract_block_features(disc: Discriminator, images: torch.Tensor, chunk: int = 500) -> List[torch.Tensor]:
    """
    Pooled activation of every discriminator block, without gradients.

    Args:
        disc: Frozen discriminator
        images: (n, C, H, W) images
        chunk: Images per forward pass

    Returns:
        One (n, width_b) float64 tensor per block
    """
    dtype = next(disc.parameters()).dtype
    per_block: List[List[torch.Tensor]] = [[] for _ in range(disc.num_blocks)]
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            output = disc(images[start:start + chunk].to(dtype))
            for block, feature in enumerate(output.block_features):
                per_block[block].append(feature.to(torch.float64))
    return [torch.cat(parts) for parts in per_block]


def probe_discriminator(disc: Discriminator, train: ImageDataset, test: ImageDataset,
                        protocol: Optional[ProbeProtocol] = None) -> ProbeResult:
    """Probe every block of a discriminator on labeled train/test images."""
    if train.labels is None or test.labels is None:
        raise EvaluationError("probing needs labeled datasets")
    return linear_probe(
        extract_block_features(disc, train.images),
        train.labels,
        extract_block_features(disc, test.images),
        test.labels,
        protocol,
        num_classes=train.num_classes,
    )


class Evaluator:
    """Scheduled FID and probe evaluation for a training run."""

    def __init__(self, config: TrainConfig, train: ImageDataset, test: ImageDataset,
                 embedder: Optional[Embedder]):
        self.config = config
        self.embedder = embedder
        self.num_classes = train.num_classes
        self.real_moments = dataset_moments(test, embedder) if embedder is not None else None
        self.real_count = len(test)
        self.protocol = ProbeProtocol(epochs=config.probe_epochs, seed=config.seed)
        self.probe_train = None
        self.probe_test = None
        if config.probe_eval and train.labels is not None:
            self.probe_train = train.split(min(config.probe_train_size, len(train) - 1))[0]
            self.probe_test = test.split(min(config.probe_test_size, len(test) - 1))[0]

    def fid(self, gen: Generator, step: int) -> Optional[FIDResult]:
        if self.embedder is None:
            return None
        fake = generated_images(gen, self.config.fid_samples, self.config.seed * 1000003 + step,
                                self.num_classes)
        result = fid_from_moments(self.real_moments, gaussian_fit(embed_images(fake, self.embedder)))
        logger.info("step %d: FID %.3f%s", step, result.value, " (regularized)" if result.regularized else "")
        return result

    def probe(self, disc: Discriminator, step: int) -> Optional[ProbeResult]:
        if self.probe_train is None:
            return None
        result = probe_discriminator(disc, self.probe_train, self.probe_test, self.protocol)
        logger.info("step %d: probe accuracies %s", step, ["%.4f" % a for a in result.accuracies])
        return result


def probe_over_training(
    checkpoints: Sequence[Union[str, Path]],
    config: TrainConfig,
    train: ImageDataset,
    test: ImageDataset,
    protocol: Optional[ProbeProtocol] = None,
    fid_by_step: Optional[Dict[int, float]] = None,
) -> List[Dict[str, Any]]:
    """
    Linear-probe a series of discriminator checkpoints.

    The step-0 checkpoint (random initialization) is the baseline row.

    Args:
        checkpoints: Checkpoint files written by a training run
        config: Config of that run (to rebuild the networks)
        train: Labeled images for probe training
        test: Labeled images for probe testing
        protocol: Probe schedule
        fid_by_step: FID values to pair with probe accuracies

    Returns:
        Rows with step, kind, per-block accuracies, best, fid and collapse flag

    Raises:
        EvaluationError: If a checkpoint is missing
    """
    rows = []
    for path in checkpoints:
        if not Path(path).exists():
            raise EvaluationError(f"missing checkpoint: {path}")
        tensors = load_checkpoint(path)
        _, disc = build_models(config, train.channels, train.num_classes)
        load_named_state(disc, "discriminator", tensors)
        step = int(tensors["run/step"].item())
        result = probe_discriminator(disc, train, test, protocol)
        row: Dict[str, Any] = {"step": step, "kind": "random_init" if step == 0 else "trained"}
        row.update(result.row())
        fid = (fid_by_step or {}).get(step)
        row["fid"] = fid
        row["collapsed"] = fid is not None and fid > COLLAPSE_FID
        rows.append(row)
    return sorted(rows, key=lambda r: r["step"])


def detect_collapse(fids: Iterable[Optional[float]], factor: float = COLLAPSE_FACTOR,
                    absolute: Optional[float] = COLLAPSE_FID) -> bool:
    """
    Flag a run whose FID blows up.

    A run collapsed when an evaluated FID exceeds ``factor`` times the running
    minimum so far, or exceeds ``absolute``.
    """
    running = math.inf
    for fid in fids:
        if fid is None or (isinstance(fid, float) and math.isnan(fid)):
            continue
        if running < math.inf and fid > factor * running:
            return True
        if absolute is not None and fid > absolute:
            return True
        running = min(running, fid)
    return False


def format_cell(value: Any) -> str:
    """CSV cell text: empty for None, true/false for bools, repr for floats."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str) -> Any:
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def write_curve_csv(path: Union[str, Path], rows: Sequence[Dict[str, Any]],
                    columns: Optional[Sequence[str]] = None) -> None:
    """
    Write curve rows as CSV; floats are written with repr so reloading is exact.

    Args:
        path: Destination file
        rows: Row dicts
        columns: Column order (first row's keys when None)
    """
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(column)) for column in columns])


def read_curve_csv(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read a CSV written by :func:`write_curve_csv`."""
    with open(path, newline="", encoding="utf-8") as handle:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(handle)]


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    t = torch.tensor(values, dtype=torch.float64)
    std = t.std(unbiased=True).item() if len(values) > 1 else 0.0
    return t.mean().item(), std


def summarize_runs(per_seed: Dict[int, Dict[str, Optional[float]]], config_digest: str,
                   lower_is_better: Sequence[str] = ("fid",), extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Aggregate final metrics across seeds.

    Mean and (sample) standard deviation follow the robustness-table
    convention; ``best`` is the best-of-seeds value (lowest FID, highest
    accuracy).

    Args:
        per_seed: seed -> {metric name -> value}
        config_digest: Hash of the resolved config
        lower_is_better: Metrics where smaller is better
        extra: Additional keys copied into the summary

    Returns:
        JSON-serializable summary
    """
    names = sorted({name for metrics in per_seed.values() for name in metrics})
    summary: Dict[str, Any] = {"config_hash": config_digest, "seeds": sorted(per_seed), "metrics": {}}
    for name in names:
        values = [m[name] for m in per_seed.values() if m.get(name) is not None]
        values = [v for v in values if not math.isnan(v)]
        mean, std = _mean_std(values)
        if values:
            best = min(values) if name in lower_is_better else max(values)
        else:
            best = None
        summary["metrics"][name] = {"mean": mean, "std": std, "best": best, "n": len(values)}
    summary.update(extra or {})
    return summary


def write_summary(path: Union[str, Path], summary: Dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# Forgetting harness.


@dataclass
class ForgettingConfig:
    """Settings of the cycling 1-vs-all task experiment."""

    period: int = 1000
    n_tasks: int = 10
    cycles: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    image_size: int = 16
    dataset_size: int = 10000
    eval_per_class: int = 100
    rotation_weight: float = 1.0
    n_rot_base: int = 16
    width: int = 16
    eval_every: int = 1
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.period * self.n_tasks * self.cycles


class ForgettingNet(nn.Module):
    """Binary task classifier with an auxiliary rotation head."""

    def __init__(self, channels: int, width: int):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.task_head = nn.Linear(2 * width, 1)
        self.rot_head = nn.Linear(2 * width, 4)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(x)
        return self.task_head(h).squeeze(1), self.rot_head(h)


@dataclass
class ForgettingCurve:
    variant: str
    steps: List[int] = field(default_factory=list)
    tasks: List[int] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)
    cycle_means: List[float] = field(default_factory=list)
    switch_drops: List[float] = field(default_factory=list)

    def rows(self) -> List[Dict[str, Any]]:
        return [{"step": s, "task": t, "accuracy": a}
                for s, t, a in zip(self.steps, self.tasks, self.accuracies)]


def _balanced_task_sets(dataset: ImageDataset, n_tasks: int, per_class: int,
                        seed: int) -> List[ImageBatch]:
    """Held-out evaluation set per task: per_class positives, as many negatives."""
    sets = []
    for task in range(n_tasks):
        positives = torch.nonzero(dataset.labels == task).squeeze(1)[:per_class]
        negatives = torch.nonzero(dataset.labels != task).squeeze(1)
        pick = torch.randperm(negatives.shape[0], generator=stream_generator(seed, "forget_eval", task))
        negatives = negatives[pick[:positives.shape[0]]]
        index = torch.cat([positives, negatives])
        batch = dataset.batch(index)
        sets.append(ImageBatch(batch.images, (batch.labels == task).long()))
    return sets


def _run_forgetting_variant(config: ForgettingConfig, variant: str, train: ImageDataset,
                            eval_sets: List[ImageBatch]) -> ForgettingCurve:
    torch.manual_seed(config.seed)
    net = ForgettingNet(train.channels, config.width)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    curve = ForgettingCurve(variant)
    stream = nonstationary_task_stream(train, config.period, config.n_tasks, config.batch_size,
                                       config.seed, total_steps=config.total_steps)
    for step, (task, batch) in enumerate(stream):
        logits, _ = net(batch.images)
        loss = F.binary_cross_entropy_with_logits(logits, batch.labels.to(logits.dtype))
        if variant == "self_supervised":
            rotated, rot_labels = make_rotation_batch(batch, min(config.n_rot_base, len(batch)))
            _, rot_logits = net(rotated.images)
            loss = loss + config.rotation_weight * rotation_nll(rot_logits, rot_labels)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % config.eval_every == 0:
            held_out = eval_sets[task]
            with torch.no_grad():
                task_logits, _ = net(held_out.images)
            accuracy = ((task_logits > 0).long() == held_out.labels).double().mean().item()
            curve.steps.append(step)
            curve.tasks.append(task)
            curve.accuracies.append(accuracy)
        if (step + 1) % (config.period * config.n_tasks) == 0:
            logger.info("%s: finished cycle %d", variant, (step + 1) // (config.period * config.n_tasks))
    _summarize_curve(curve, config)
    return curve


def _summarize_curve(curve: ForgettingCurve, config: ForgettingConfig) -> None:
    cycle_length = config.period * config.n_tasks
    for cycle in range(config.cycles):
        values = [a for s, a in zip(curve.steps, curve.accuracies) if s // cycle_length == cycle]
        curve.cycle_means.append(sum(values) / len(values) if values else float("nan"))
    for i in range(1, len(curve.steps)):
        previous, current = curve.steps[i - 1], curve.steps[i]
        if task_for_step(previous, config.period, config.n_tasks) != task_for_step(current, config.period, config.n_tasks):
            curve.switch_drops.append(curve.accuracies[i - 1] - curve.accuracies[i])


def forgetting_experiment(config: ForgettingConfig,
                          variants: Sequence[str] = ("vanilla", "self_supervised")) -> Dict[str, ForgettingCurve]:
    """
    Train classifiers on cycling 1-vs-all tasks and record current-task accuracy.

    Args:
        config: Experiment settings
        variants: Subset of ("vanilla", "self_supervised")

    Returns:
        variant -> ForgettingCurve with per-cycle means and task-switch drops
    """
    dataset = synthetic_shapes_dataset(config.dataset_size, config.image_size, config.n_tasks, config.seed)
    train, held_out = dataset.split(len(dataset) - config.eval_per_class * config.n_tasks * 2)
    eval_sets = _balanced_task_sets(held_out, config.n_tasks, config.eval_per_class, config.seed)
    curves = {}
    for variant in variants:
        if variant not in ("vanilla", "self_supervised"):
            raise EvaluationError(f"unknown forgetting variant: {variant}")
        curves[variant] = _run_forgetting_variant(config, variant, train, eval_sets)
        logger.info("%s: cycle means %s", variant, curves[variant].cycle_means)
    return curves


def forgetting_summary(curves_by_seed: Dict[int, Dict[str, ForgettingCurve]]) -> Dict[str, Any]:
    """Per-variant cycle means across seeds, with their seed-level spread."""
    summary: Dict[str, Any] = {"seeds": sorted(curves_by_seed), "variants": {}}
    variants = sorted({v for curves in curves_by_seed.values() for v in curves})
    for variant in variants:
        curves = [curves_by_seed[s][variant] for s in sorted(curves_by_seed) if variant in curves_by_seed[s]]
        n_cycles = min(len(c.cycle_means) for c in curves)
        cycles = []
        for cycle in range(n_cycles):
            mean, std = _mean_std([c.cycle_means[cycle] for c in curves])
            cycles.append({"mean": mean, "std": std})
        drops = [d for c in curves for d in c.switch_drops]
        summary["variants"][variant] = {
            "cycles": cycles,
            "mean_switch_drop": sum(drops) / len(drops) if drops else None,
            "per_seed": {str(s): asdict(curves_by_seed[s][variant])["cycle_means"]
                         for s in sorted(curves_by_seed) if variant in curves_by_seed[s]},
        }
    return summary
