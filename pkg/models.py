"""Generator and two-headed discriminator networks.

The generator is a residual upsampling network whose batch norm can be plain,
label-conditional (cBN) or self-modulated from the latent (sBN). The
discriminator is a residual downsampling network without batch norm; it
shares one trunk between a real/fake head and a 4-way rotation head, exposes
the pooled activation of every block for probing, and optionally applies
spectral normalization and projection conditioning.
"""

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import SSGANError, TrainConfig
from data import ImageBatch
from numerics import power_iteration_sigma, precision_dtype, singular_vector_v

logger = logging.getLogger(__name__)

GENERATOR_MODES = ("plain", "conditional_bn", "self_modulated_bn")
SBN_HIDDEN = 32

CHECKPOINT_MAGIC = b"SSGN"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_TAG_DTYPES = {0: ("<f4", torch.float32), 1: ("<f8", torch.float64), 2: ("<i8", torch.int64)}


@dataclass(frozen=True)
class Architecture:
    """Channel layout of a generator/discriminator pair."""

    g_widths: Tuple[int, ...]
    d_widths: Tuple[int, ...]
    d_downsample: Tuple[bool, ...]


ARCHITECTURES: Dict[str, Architecture] = {
    "resnet32": Architecture(
        g_widths=(256, 256, 256, 256),
        d_widths=(64, 128, 128, 256),
        d_downsample=(True, True, False, False),
    ),
    "resnet128": Architecture(
        g_widths=(1024, 1024, 512, 256, 128, 64),
        d_widths=(64, 128, 256, 512, 1024, 1024),
        d_downsample=(True, True, True, True, True, False),
    ),
}


class ModelError(SSGANError):
    """Raised for invalid model construction or inputs."""


class CheckpointFormatError(ModelError):
    """Raised when a checkpoint file cannot be decoded."""


@dataclass
class DiscriminatorOutput:
    """Both head outputs plus the pooled activation of every trunk block."""

    gan_logit: torch.Tensor
    rot_logits: torch.Tensor
    block_features: List[torch.Tensor]

    @property
    def final_feature(self) -> torch.Tensor:
        return self.block_features[-1]


class SpectralNormMixin:
    """Divides the layer weight by a persistent power-iteration estimate.

    The ``sn_u`` buffer only moves in :meth:`advance_spectral_norm`; forward
    passes reuse it, so the number of iterations per training step is exact.
    """

    def init_spectral_norm(self, enabled: bool, generator: torch.Generator) -> None:
        self.spectral_norm = enabled
        u = torch.randn(self.weight.shape[0], generator=generator)
        self.register_buffer("sn_u", u / u.norm())

    def effective_weight(self) -> torch.Tensor:
        if not self.spectral_norm:
            return self.weight
        matrix = self.weight.reshape(self.weight.shape[0], -1)
        u = self.sn_u.to(matrix.dtype)
        v = singular_vector_v(matrix, u)
        sigma = torch.dot(u, matrix @ v)
        return self.weight / sigma

    @torch.no_grad()
    def advance_spectral_norm(self, iters: int = 1) -> float:
        _, u = power_iteration_sigma(self.weight.reshape(self.weight.shape[0], -1), self.sn_u, iters)
        self.sn_u.copy_(u)
        return torch.dot(self.sn_u, self.weight.reshape(self.weight.shape[0], -1)
                         @ singular_vector_v(self.weight, self.sn_u)).item()


class SNConv2d(SpectralNormMixin, nn.Conv2d):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 spectral_norm: bool, generator: torch.Generator):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.init_spectral_norm(spectral_norm, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.effective_weight(), self.bias)


class SNLinear(SpectralNormMixin, nn.Linear):
    def __init__(self, in_features: int, out_features: int, spectral_norm: bool,
                 generator: torch.Generator):
        super().__init__(in_features, out_features)
        self.init_spectral_norm(spectral_norm, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


class ModulatedBatchNorm2d(nn.Module):
    """Batch norm whose scale and shift are learned, label- or latent-driven."""

    def __init__(self, num_features: int, mode: str, num_classes: int = 0, z_dim: int = 0):
        super().__init__()
        self.mode = mode
        self.num_features = num_features
        if mode == "plain":
            self.weight = nn.Parameter(torch.ones(num_features))
            self.bias = nn.Parameter(torch.zeros(num_features))
        elif mode == "conditional_bn":
            self.gamma = nn.Embedding(num_classes, num_features)
            self.beta = nn.Embedding(num_classes, num_features)
            nn.init.ones_(self.gamma.weight)
            nn.init.zeros_(self.beta.weight)
        elif mode == "self_modulated_bn":
            self.hidden = nn.Linear(z_dim, SBN_HIDDEN)
            self.out = nn.Linear(SBN_HIDDEN, 2 * num_features)
        else:
            raise ModelError(f"unknown generator mode: {mode}")

    def modulation(self, z: Optional[torch.Tensor] = None,
                   labels: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Per-sample scale and shift.

        Args:
            z: Latent batch (self-modulated mode)
            labels: Class labels (conditional mode)

        Returns:
            Tuple of (scale, shift), each (N, C) or (C,) in plain mode
        """
        if self.mode == "plain":
            return self.weight, self.bias
        if self.mode == "conditional_bn":
            return self.gamma(labels), self.beta(labels)
        delta = self.out(F.relu(self.hidden(z)))
        return 1.0 + delta[:, :self.num_features], delta[:, self.num_features:]

    def forward(self, x: torch.Tensor, z: Optional[torch.Tensor] = None,
                labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        normalized = F.batch_norm(x, None, None, training=True, eps=1e-5)
        scale, shift = self.modulation(z, labels)
        if scale.ndim == 1:
            return normalized * scale[None, :, None, None] + shift[None, :, None, None]
        return normalized * scale[:, :, None, None] + shift[:, :, None, None]


class GeneratorBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, mode: str, num_classes: int, z_dim: int):
        super().__init__()
        self.bn1 = ModulatedBatchNorm2d(in_channels, mode, num_classes, z_dim)
        # Every block output reaches a batch norm, which would cancel a bias.
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = ModulatedBatchNorm2d(out_channels, mode, num_classes, z_dim)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x, z, labels):
        h = F.relu(self.bn1(x, z, labels))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, z, labels)))
        return h + self.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    """Maps a latent batch to upright images in (-1, 1)."""

    def __init__(self, widths: Sequence[int], image_size: int, channels: int = 3,
                 z_dim: int = 128, mode: str = "plain", num_classes: int = 0):
        super().__init__()
        if mode not in GENERATOR_MODES:
            raise ModelError(f"unknown generator mode: {mode}")
        if mode == "conditional_bn" and num_classes <= 0:
            raise ModelError("conditional_bn requires num_classes > 0")
        n_up = int(round(math.log2(image_size / 4)))
        if 4 * 2 ** n_up != image_size or len(widths) < n_up + 1:
            raise ModelError(f"no generator layout for image size {image_size}")
        widths = list(widths[:n_up + 1])
        self.mode = mode
        self.z_dim = z_dim
        self.num_classes = num_classes
        self.image_size = image_size
        self.channels = channels
        self.base_width = widths[0]
        self.project = nn.Linear(z_dim, widths[0] * 16)
        self.blocks = nn.ModuleList([
            GeneratorBlock(widths[i], widths[i + 1], mode, num_classes, z_dim) for i in range(n_up)
        ])
        self.bn_out = ModulatedBatchNorm2d(widths[-1], mode, num_classes, z_dim)
        self.conv_out = nn.Conv2d(widths[-1], channels, 3, padding=1)

    def forward(self, z: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.project(z).reshape(z.shape[0], self.base_width, 4, 4)
        for block in self.blocks:
            h = block(h, z, labels)
        h = F.relu(self.bn_out(h, z, labels))
        return torch.tanh(self.conv_out(h))


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, downsample: bool, first: bool,
                 spectral_norm: bool, generator: torch.Generator):
        super().__init__()
        self.downsample = downsample
        self.first = first
        self.conv1 = SNConv2d(in_channels, out_channels, 3, spectral_norm, generator)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, spectral_norm, generator)
        self.shortcut = SNConv2d(in_channels, out_channels, 1, spectral_norm, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x if self.first else F.relu(x)
        h = self.conv2(F.relu(self.conv1(h)))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        if self.first:
            skip = self.shortcut(F.avg_pool2d(x, 2) if self.downsample else x)
        else:
            skip = self.shortcut(x)
            if self.downsample:
                skip = F.avg_pool2d(skip, 2)
        return h + skip


class Discriminator(nn.Module):
    """Shared residual trunk with a real/fake head and a rotation head."""

    def __init__(self, widths: Sequence[int], downsample: Sequence[bool], channels: int = 3,
                 spectral_norm: bool = True, num_classes: int = 0, projection: bool = False,
                 seed: int = 0):
        super().__init__()
        if len(widths) != len(downsample):
            raise ModelError("widths and downsample flags must have equal length")
        if projection and num_classes <= 0:
            raise ModelError("projection conditioning requires num_classes > 0")
        generator = torch.Generator().manual_seed(seed)
        self.channels = channels
        self.num_classes = num_classes
        self.projection = projection
        self.blocks = nn.ModuleList()
        in_channels = channels
        for i, (width, down) in enumerate(zip(widths, downsample)):
            self.blocks.append(DiscriminatorBlock(in_channels, width, down, i == 0, spectral_norm, generator))
            in_channels = width
        self.gan_head = SNLinear(in_channels, 1, spectral_norm, generator)
        self.rot_head = SNLinear(in_channels, 4, spectral_norm, generator)
        self.embedding = nn.Embedding(num_classes, in_channels) if projection else None

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def spectral_layers(self) -> List[SpectralNormMixin]:
        return [m for m in self.modules() if isinstance(m, SpectralNormMixin) and m.spectral_norm]

    def advance_spectral_norm(self, iters: int = 1) -> None:
        for layer in self.spectral_layers():
            layer.advance_spectral_norm(iters)

    def forward(self, x: torch.Tensor, labels: Optional[torch.Tensor] = None) -> DiscriminatorOutput:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ModelError(f"expected (N, {self.channels}, H, W) input, got {tuple(x.shape)}")
        features = []
        h = x
        for block in self.blocks:
            h = block(h)
            features.append(F.relu(h).mean(dim=(2, 3)))
        final = features[-1]
        gan_logit = self.gan_head(final).squeeze(1)
        if self.projection and labels is not None:
            gan_logit = projection_logit(gan_logit, final, labels, self.embedding.weight)
        return DiscriminatorOutput(gan_logit, self.rot_head(final), features)


def projection_logit(gan_logit: torch.Tensor, features: torch.Tensor, labels: torch.Tensor,
                     embedding: torch.Tensor) -> torch.Tensor:
    """
    Add the class-projection term to the unconditional logit.

    Args:
        gan_logit: Unconditional logits (N,)
        features: Final pooled trunk features (N, D)
        labels: Class labels (N,)
        embedding: Class embedding matrix (num_classes, D)

    Returns:
        gan_logit + <embedding[label], features> per sample

    Raises:
        ModelError: If a label is out of range
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= embedding.shape[0]):
        raise ModelError(f"class label out of range [0, {embedding.shape[0]})")
    return gan_logit + (embedding[labels] * features).sum(dim=1)


def generator_forward(z: torch.Tensor, generator: Generator,
                      condition: Optional[torch.Tensor] = None) -> ImageBatch:
    """
    Generate upright images from a latent batch.

    Args:
        z: Latent batch (N, z_dim)
        generator: Generator network
        condition: Class labels, required exactly when the mode is conditional_bn

    Returns:
        ImageBatch of shape (N, C, size, size) with values in (-1, 1)

    Raises:
        ModelError: On a mode/condition mismatch or wrong latent width
    """
    if (condition is not None) != (generator.mode == "conditional_bn"):
        raise ModelError(f"condition must be given iff mode is conditional_bn (mode={generator.mode})")
    if z.ndim != 2 or z.shape[1] != generator.z_dim:
        raise ModelError(f"expected latent of shape (N, {generator.z_dim}), got {tuple(z.shape)}")
    return ImageBatch(generator(z, condition), condition)


def discriminator_forward(batch: ImageBatch, discriminator: Discriminator,
                          use_labels: bool = False) -> DiscriminatorOutput:
    """
    Score a batch with both heads in one trunk pass.

    Args:
        batch: Images (and labels when projection is used)
        discriminator: Discriminator network
        use_labels: Add the projection term using batch.labels

    Returns:
        DiscriminatorOutput
    """
    labels = batch.labels if use_labels else None
    if use_labels and labels is None:
        raise ModelError("projection discriminator needs labels")
    return discriminator(batch.images, labels)


def spectral_normalize(discriminator: Discriminator, advance: bool = False) -> Dict[str, torch.Tensor]:
    """
    Effective (W / sigma) weights of every spectrally normalized layer.

    Args:
        discriminator: Discriminator with spectral norm enabled
        advance: Run one power-iteration step per layer first

    Returns:
        Mapping from layer name to effective weight
    """
    if advance:
        discriminator.advance_spectral_norm()
    return {
        name: module.effective_weight().detach()
        for name, module in discriminator.named_modules()
        if isinstance(module, SpectralNormMixin) and module.spectral_norm
    }


def sample_latent(n: int, z_dim: int, generator: torch.Generator,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard-normal latent batch."""
    return torch.randn(n, z_dim, generator=generator).to(dtype)


def _scaled(widths: Sequence[int], scale: float) -> Tuple[int, ...]:
    return tuple(max(1, int(round(w * scale))) for w in widths)


def build_models(config: TrainConfig, channels: int, num_classes: int) -> Tuple[Generator, Discriminator]:
    """
    Construct the generator/discriminator pair for a run.

    Args:
        config: Run configuration (variant, architecture, seed, precision)
        channels: Image channels
        num_classes: Dataset classes (needed by cond)

    Returns:
        Tuple of (Generator, Discriminator) with deterministic orthogonal init
    """
    if config.architecture not in ARCHITECTURES:
        raise ModelError(f"unknown architecture: {config.architecture}")
    if config.conditional and num_classes <= 0:
        raise ModelError("variant cond needs a labeled dataset")
    arch = ARCHITECTURES[config.architecture]
    init = torch.Generator().manual_seed(config.seed)
    gen = Generator(
        _scaled(arch.g_widths, config.channel_scale),
        config.image_size,
        channels,
        config.z_dim,
        config.generator_mode,
        num_classes if config.conditional else 0,
    )
    disc = Discriminator(
        _scaled(arch.d_widths, config.channel_scale),
        arch.d_downsample,
        channels,
        spectral_norm=config.regularizer == "spectral_norm",
        num_classes=num_classes if config.conditional else 0,
        projection=config.conditional,
        seed=config.seed + 1,
    )
    initialize_weights(gen, init)
    initialize_weights(disc, init)
    dtype = precision_dtype(config.precision)
    return gen.to(dtype), disc.to(dtype)


def initialize_weights(module: nn.Module, generator: torch.Generator) -> None:
    """
    Orthogonal weights, zero biases; batch-norm modulation tables start at
    scale 1 and shift 0.
    """
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            nn.init.orthogonal_(sub.weight, generator=generator)
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, Discriminator) and sub.embedding is not None:
            nn.init.orthogonal_(sub.embedding.weight, generator=generator)


def named_state(module: nn.Module, prefix: str) -> "OrderedDict[str, torch.Tensor]":
    """Parameters and buffers of a module under a name prefix."""
    state = OrderedDict()
    for name, tensor in module.state_dict().items():
        state[f"{prefix}/{name}"] = tensor
    return state


def load_named_state(module: nn.Module, prefix: str, tensors: Dict[str, torch.Tensor]) -> None:
    own = {name[len(prefix) + 1:]: t for name, t in tensors.items() if name.startswith(prefix + "/")}
    missing, unexpected = module.load_state_dict(own, strict=False)
    if missing or unexpected:
        raise CheckpointFormatError(f"{prefix}: missing={missing} unexpected={unexpected}")


def encode_checkpoint(tensors: Dict[str, torch.Tensor]) -> bytes:
    """
    Serialize named tensors in the SSGN format.

    Layout: magic, version u32, count u32, then per entry name length u32,
    UTF-8 name, dtype tag u8, rank u32, dims u32 each, little-endian values.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"{name}: unsupported dtype {tensor.dtype}")
        tag = _DTYPE_TAGS[tensor.dtype]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", tag, tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.numpy().astype(_TAG_DTYPES[tag][0], copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> "OrderedDict[str, torch.Tensor]":
    """Inverse of :func:`encode_checkpoint`."""
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        offset = 12
        tensors = OrderedDict()
        for _ in range(count):
            (name_length,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_length].decode("utf-8")
            offset += name_length
            tag, rank = struct.unpack_from("<BI", payload, offset)
            offset += struct.calcsize("<BI")
            dims = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            if tag not in _TAG_DTYPES:
                raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
            numpy_dtype, torch_dtype = _TAG_DTYPES[tag]
            count_values = int(np.prod(dims)) if rank else 1
            size = count_values * np.dtype(numpy_dtype).itemsize
            if offset + size > len(payload):
                raise CheckpointFormatError(f"{name}: truncated payload")
            values = np.frombuffer(payload, dtype=numpy_dtype, count=count_values, offset=offset)
            offset += size
            tensors[name] = torch.from_numpy(values.astype(numpy_dtype[1:])).reshape(dims).to(torch_dtype)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated payload: {exc}")
    if offset != len(payload):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return tensors


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, torch.Tensor]) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_checkpoint(tensors))


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, torch.Tensor]":
    """
    Read an SSGN checkpoint.

    Raises:
        CheckpointFormatError: On bad magic, truncation or unknown dtypes
    """
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())
