"""Alternating GAN optimization with rotation self-supervision.

One training step runs ``d_steps`` discriminator updates, each on a fresh real
batch and fresh latents, followed by one generator update. Every random draw
comes from a stream keyed by (seed, stream name, step, sub-step), so a run can
be resumed from any checkpoint and replays bit for bit.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import yaml

from config import SSGANError, TrainConfig, apply_overrides, config_hash, dump_config
from data import (
    ImageBatch,
    ImageDataset,
    load_dataset,
    make_rotation_batch,
    make_train_test,
    stream_generator,
)
from evaluation import (
    Embedder,
    Evaluator,
    detect_collapse,
    format_cell,
    pca_embedder,
    read_curve_csv,
    summarize_runs,
    train_classifier_embedder,
    write_curve_csv,
    write_summary,
)
from losses import LossError, discriminator_loss, generator_loss, gradient_penalty
from models import (
    Discriminator,
    Generator,
    build_models,
    generator_forward,
    load_checkpoint,
    load_named_state,
    named_state,
    sample_latent,
    save_checkpoint,
)
from numerics import precision_dtype

logger = logging.getLogger(__name__)

GRIDS_PATH = Path(__file__).with_name("grids.yaml")
CHECKPOINT_PATTERN = "step_{:07d}.ssgn"


class TrainingError(SSGANError):
    """Raised when a training run cannot continue."""

    run_dir: Optional[str] = None


class TrainingDivergedError(TrainingError):
    """Raised when a loss component stops being finite."""

    def __init__(self, component: str, step: int):
        super().__init__(f"{component} is not finite at step {step}")
        self.component = component
        self.step = step


@dataclass
class AdamState:
    """First/second moments per parameter and the shared step counter."""

    m: List[torch.Tensor]
    v: List[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(
            [torch.zeros_like(p, memory_format=torch.contiguous_format) for p in params],
            [torch.zeros_like(p, memory_format=torch.contiguous_format) for p in params],
        )

    def tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        out = {f"{prefix}/t": torch.tensor(self.t, dtype=torch.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m/{i}"] = m
            out[f"{prefix}/v/{i}"] = v
        return out

    @classmethod
    def from_tensors(cls, prefix: str, tensors: Dict[str, torch.Tensor], count: int) -> "AdamState":
        try:
            m = [tensors[f"{prefix}/m/{i}"] for i in range(count)]
            v = [tensors[f"{prefix}/v/{i}"] for i in range(count)]
            t = int(tensors[f"{prefix}/t"].item())
        except KeyError as exc:
            raise TrainingError(f"checkpoint lacks optimizer tensor {exc}") from exc
        return cls(m, v, t)


@dataclass
class OptimizerStates:
    generator: AdamState
    discriminator: AdamState

    @classmethod
    def for_models(cls, gen: Generator, disc: Discriminator) -> "OptimizerStates":
        return cls(AdamState.zeros_like(list(gen.parameters())),
                   AdamState.zeros_like(list(disc.parameters())))


@dataclass
class MetricRecord:
    """One row of the metric log."""

    step: int
    g_total: float
    d_total: float
    d_rot_nll: float
    g_rot_nll: float
    fid: Optional[float] = None
    probe: Optional[List[float]] = None
    wall_time: Optional[float] = None
    details: Dict[str, float] = field(default_factory=dict)

    def row(self, num_blocks: int) -> Dict[str, Any]:
        values: Dict[str, Any] = {
            "step": self.step,
            "g_total": self.g_total,
            "d_total": self.d_total,
            "d_rot_nll": self.d_rot_nll,
            "g_rot_nll": self.g_rot_nll,
            "fid": self.fid,
        }
        for block in range(num_blocks):
            values[f"probe_block{block}"] = self.probe[block] if self.probe else None
        values["wall_time"] = self.wall_time
        return values

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> "MetricRecord":
        blocks = sorted((k for k in row if k.startswith("probe_block")), key=lambda k: int(k[11:]))
        probe = [row[k] for k in blocks] if blocks and row[blocks[0]] is not None else None
        return cls(int(row["step"]), row["g_total"], row["d_total"], row["d_rot_nll"],
                   row["g_rot_nll"], row.get("fid"), probe, row.get("wall_time"))


def metric_columns(num_blocks: int) -> List[str]:
    return (["step", "g_total", "d_total", "d_rot_nll", "g_rot_nll", "fid"]
            + [f"probe_block{b}" for b in range(num_blocks)] + ["wall_time"])


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float = 1e-8,
) -> Tuple[List[torch.Tensor], AdamState]:
    """
    Bias-corrected Adam update.

    The step counter is incremented before bias correction, so the first
    update moves every coordinate with a non-zero gradient by about lr.

    Args:
        params: Current parameter values
        grads: Gradients (None is treated as zero)
        state: Moments and step counter
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator offset

    Returns:
        Tuple of (new parameter values, new state); inputs are not modified

    Raises:
        TrainingError: If params, grads and moments do not align
    """
    if not len(params) == len(grads) == len(state.m) == len(state.v):
        raise TrainingError(
            f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.m)} moments"
        )
    t = state.t + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p = p.detach()
        g = torch.zeros_like(p) if g is None else g.detach()
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise TrainingError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params.append(p - lr * (m / correction1) / ((v / correction2).sqrt() + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def _apply_adam(params: List[torch.nn.Parameter], grads, state: AdamState,
                config: TrainConfig) -> AdamState:
    updated, state = adam_step(params, grads, state, config.lr, config.adam_beta1, config.adam_beta2)
    with torch.no_grad():
        for param, value in zip(params, updated):
            param.copy_(value)
    return state


def anneal_alpha(schedule: str, step: int, alpha: float = 0.2, anneal_steps: int = 0) -> float:
    """
    Generator rotation weight at a step.

    Args:
        schedule: "constant" or "linear_to_zero"
        step: Training step (>= 0)
        alpha: Base weight
        anneal_steps: T for linear_to_zero

    Returns:
        alpha for constant, alpha * max(0, 1 - step / T) for linear_to_zero
    """
    if schedule == "constant":
        return alpha
    if schedule == "linear_to_zero":
        if anneal_steps <= 0:
            raise TrainingError("linear_to_zero needs anneal_steps > 0")
        return alpha * max(0.0, 1.0 - step / anneal_steps)
    raise TrainingError(f"unknown alpha schedule: {schedule}")


def _require_finite(step: int, **components: Optional[torch.Tensor]) -> None:
    for name, value in components.items():
        if value is not None and not torch.isfinite(value).all():
            raise TrainingDivergedError(name, step)


def _gradients(loss: torch.Tensor, params: List[torch.nn.Parameter]) -> List[Optional[torch.Tensor]]:
    if not loss.requires_grad:
        return [None] * len(params)
    return list(torch.autograd.grad(loss, params, allow_unused=True))


def _sample_labels(config: TrainConfig, num_classes: int, step: int, substep: int) -> Optional[torch.Tensor]:
    if not config.conditional:
        return None
    return torch.randint(num_classes, (config.batch_size,),
                         generator=stream_generator(config.seed, "labels", step, substep))


def _discriminator_update(gen: Generator, disc: Discriminator, states: OptimizerStates,
                          dataset: ImageDataset, config: TrainConfig, step: int, substep: int,
                          beta: float, dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    real = dataset.sample_batch(config.batch_size, stream_generator(config.seed, "data", step, substep))
    real = ImageBatch(real.images.to(dtype), real.labels)
    real_labels = real.labels if config.conditional else None
    z = sample_latent(config.batch_size, config.z_dim, stream_generator(config.seed, "z", step, substep), dtype)
    fake_labels = _sample_labels(config, dataset.num_classes, step, substep)

    if substep == 0 and disc.spectral_layers():
        disc.advance_spectral_norm()
    with torch.no_grad():
        fake = generator_forward(z, gen, fake_labels).images

    real_out = disc(real.images, real_labels)
    fake_out = disc(fake, fake_labels)
    rotated, rot_labels = make_rotation_batch(real, config.n_rot_base)
    with torch.set_grad_enabled(beta > 0):
        rot_out = disc(rotated.images)

    penalty = None
    adversarial = config.variant != "rot_only"
    if adversarial and config.regularizer == "gradient_penalty":
        penalty = gradient_penalty(
            lambda x: disc(x, real_labels),
            real.images,
            fake,
            config.gp_lambda,
            stream_generator(config.seed, "penalty", step, substep),
        )
    d_total, d_gan, d_rot, penalty = discriminator_loss(
        real_out.gan_logit, fake_out.gan_logit, rot_out.rot_logits, rot_labels, beta, penalty,
        adversarial=adversarial,
    )
    _require_finite(step, d_total=d_total, d_gan=d_gan, d_rot=d_rot, penalty=penalty)
    params = list(disc.parameters())
    states.discriminator = _apply_adam(params, _gradients(d_total, params), states.discriminator, config)
    return {"d_total": d_total, "d_gan": d_gan, "d_rot": d_rot, "penalty": penalty}


def _generator_update(gen: Generator, disc: Discriminator, states: OptimizerStates,
                      config: TrainConfig, num_classes: int, step: int, alpha: float,
                      dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    substep = config.d_steps
    z = sample_latent(config.batch_size, config.z_dim, stream_generator(config.seed, "z", step, substep), dtype)
    labels = _sample_labels(config, num_classes, step, substep)
    trains = config.variant != "rot_only"
    with torch.set_grad_enabled(trains):
        fake = generator_forward(z, gen, labels)
        fake_out = disc(fake.images, labels)
        rotated, rot_labels = make_rotation_batch(fake, config.n_rot_base)
        with torch.set_grad_enabled(trains and alpha > 0):
            rot_out = disc(rotated.images)
        g_total, g_gan, g_rot = generator_loss(fake_out.gan_logit, rot_out.rot_logits, rot_labels, alpha)
    _require_finite(step, g_total=g_total, g_gan=g_gan, g_rot=g_rot)
    if trains:
        params = list(gen.parameters())
        states.generator = _apply_adam(params, _gradients(g_total, params), states.generator, config)
    return {"g_total": g_total, "g_gan": g_gan, "g_rot": g_rot}


def train_step(gen: Generator, disc: Discriminator, states: OptimizerStates, dataset: ImageDataset,
               config: TrainConfig, step: int) -> MetricRecord:
    """
    Run one alternating optimization step in place.

    Real batches are drawn inside the step (one per discriminator update) from
    the ``data`` stream keyed by (step, sub-step), so the result depends only
    on the model state, the config and the step number.

    Args:
        gen: Generator, updated in place
        disc: Discriminator, updated in place
        states: Adam states of both players, replaced in place
        dataset: Training images
        config: Run configuration
        step: 1-based step number

    Returns:
        MetricRecord with the losses of the last discriminator update and the
        generator update

    Raises:
        TrainingDivergedError: If a loss component is not finite
    """
    alpha, beta = config.effective_weights()
    alpha = anneal_alpha(config.alpha_schedule, step, alpha, config.alpha_anneal_steps)
    dtype = precision_dtype(config.precision)
    try:
        for substep in range(config.d_steps):
            d_losses = _discriminator_update(gen, disc, states, dataset, config, step, substep, beta, dtype)
        g_losses = _generator_update(gen, disc, states, config, dataset.num_classes, step, alpha, dtype)
    except LossError as exc:
        raise TrainingDivergedError(f"logits ({exc})", step) from exc

    def scalar(t: Optional[torch.Tensor]) -> float:
        return float("nan") if t is None else t.detach().item()

    details = {name: scalar(t) for name, t in {**d_losses, **g_losses}.items()}
    details["alpha"] = alpha
    return MetricRecord(
        step=step,
        g_total=details["g_total"],
        d_total=details["d_total"],
        d_rot_nll=details["d_rot"],
        g_rot_nll=details["g_rot"],
        details=details,
    )


def checkpoint_tensors(gen: Generator, disc: Discriminator, states: OptimizerStates,
                       step: int) -> Dict[str, torch.Tensor]:
    tensors: Dict[str, torch.Tensor] = {"run/step": torch.tensor(step, dtype=torch.int64)}
    tensors.update(named_state(gen, "generator"))
    tensors.update(named_state(disc, "discriminator"))
    tensors.update(states.generator.tensors("adam_g"))
    tensors.update(states.discriminator.tensors("adam_d"))
    return tensors


def restore_checkpoint(tensors: Dict[str, torch.Tensor], gen: Generator,
                       disc: Discriminator) -> Tuple[OptimizerStates, int]:
    """Load model and optimizer state; returns the states and the step."""
    load_named_state(gen, "generator", tensors)
    load_named_state(disc, "discriminator", tensors)
    states = OptimizerStates(
        AdamState.from_tensors("adam_g", tensors, len(list(gen.parameters()))),
        AdamState.from_tensors("adam_d", tensors, len(list(disc.parameters()))),
    )
    return states, int(tensors["run/step"].item())


def checkpoint_paths(run_dir: Union[str, Path]) -> List[Path]:
    return sorted((Path(run_dir) / "checkpoints").glob("step_*.ssgn"))


@dataclass
class RunResult:
    run_dir: Path
    records: List[MetricRecord]
    checkpoints: List[Path]
    summary: Dict[str, Any]


def _write_metrics_header(path: Path, columns: List[str], records: List[MetricRecord], num_blocks: int) -> None:
    write_curve_csv(path, [r.row(num_blocks) for r in records], columns)


def _append_metric(path: Path, record: MetricRecord, columns: List[str], num_blocks: int) -> None:
    row = record.row(num_blocks)
    with open(path, "a", newline="", encoding="utf-8") as handle:
        handle.write(",".join(format_cell(row[c]) for c in columns) + "\n")


def run_summary(config: TrainConfig, records: List[MetricRecord],
                evaluator: Optional[Evaluator] = None) -> Dict[str, Any]:
    """Final metrics of one run in the shared summary format."""
    fids = [r.fid for r in records if r.fid is not None]
    final: Dict[str, Optional[float]] = {"fid": fids[-1] if fids else None,
                                         "best_fid": min(fids) if fids else None}
    probed = [r for r in records if r.probe]
    if probed:
        for block, accuracy in enumerate(probed[-1].probe):
            final[f"probe_block{block}"] = accuracy
    extra = {
        "variant": config.variant,
        "steps": records[-1].step if records else 0,
        "collapsed": detect_collapse(fids),
        "fid_samples": config.fid_samples if evaluator and evaluator.embedder else None,
        "real_samples": evaluator.real_count if evaluator and evaluator.embedder else None,
        "embedder": config.embedder,
    }
    return summarize_runs({config.seed: final}, config_hash(config), extra=extra)


def run_experiment(config: TrainConfig, dataset: ImageDataset, run_dir: Union[str, Path],
                   evaluator: Optional[Evaluator] = None, resume: bool = False) -> RunResult:
    """
    Train for config.total_steps steps and write the run artifacts.

    Writes ``metrics.csv`` (a row every ``log_every`` steps, at every
    evaluation step and at the last step), ``checkpoints/step_XXXXXXX.ssgn``
    (step 0 and every checkpoint interval) and ``summary.json``.

    Args:
        config: Validated run configuration
        dataset: Training images
        run_dir: Output directory
        evaluator: FID/probe evaluator for scheduled evaluations
        resume: Continue from the latest checkpoint in run_dir

    Returns:
        RunResult

    Raises:
        TrainingError: On divergence, with run_dir attached
    """
    config.validate()
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.csv"
    torch.set_num_threads(config.threads)
    torch.use_deterministic_algorithms(True)

    gen, disc = build_models(config, dataset.channels, dataset.num_classes)
    states = OptimizerStates.for_models(gen, disc)
    columns = metric_columns(disc.num_blocks)
    records: List[MetricRecord] = []
    start = 0
    existing = checkpoint_paths(run_dir) if resume else []
    if existing:
        states, start = restore_checkpoint(load_checkpoint(existing[-1]), gen, disc)
        if metrics_path.exists():
            records = [MetricRecord.from_row(r) for r in read_curve_csv(metrics_path)]
            records = [r for r in records if r.step <= start]
        logger.info("resuming %s from step %d", run_dir, start)
    else:
        save_checkpoint(ckpt_dir / CHECKPOINT_PATTERN.format(0), checkpoint_tensors(gen, disc, states, 0))
    _write_metrics_header(metrics_path, columns, records, disc.num_blocks)

    eval_every = config.resolved_eval_every
    checkpoint_every = config.resolved_checkpoint_every
    started = time.perf_counter()
    for step in range(start + 1, config.total_steps + 1):
        try:
            record = train_step(gen, disc, states, dataset, config, step)
        except TrainingError as exc:
            exc.run_dir = str(run_dir)
            logger.error("run %s failed: %s", run_dir, exc)
            raise
        last = step == config.total_steps
        evaluate = evaluator is not None and (step % eval_every == 0 or last)
        if evaluate:
            fid = evaluator.fid(gen, step)
            probe = evaluator.probe(disc, step)
            record.fid = fid.value if fid is not None else None
            record.probe = probe.accuracies if probe is not None else None
        if step % config.log_every == 0 or evaluate or last:
            if config.record_wall_time:
                record.wall_time = time.perf_counter() - started
            records.append(record)
            _append_metric(metrics_path, record, columns, disc.num_blocks)
            logger.info("step %d: d_total=%.4f g_total=%.4f d_rot=%.4f g_rot=%.4f",
                        step, record.d_total, record.g_total, record.d_rot_nll, record.g_rot_nll)
        if step % checkpoint_every == 0 or last:
            save_checkpoint(ckpt_dir / CHECKPOINT_PATTERN.format(step),
                            checkpoint_tensors(gen, disc, states, step))

    summary = run_summary(config, records, evaluator)
    write_summary(run_dir / "summary.json", summary)
    return RunResult(run_dir, records, checkpoint_paths(run_dir), summary)


def source_version() -> str:
    try:
        return metadata.version("ssgan")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    """Identity of a run: resolved config, dataset, seeds and layout."""

    config_path: Optional[str]
    config: Dict[str, Any]
    config_hash: str
    dataset: str
    dataset_hash: str
    seeds: List[int]
    source_version: str
    layout: Dict[str, str] = field(default_factory=lambda: {
        "manifest": "manifest.json",
        "config": "config.cfg",
        "metrics": "metrics.csv",
        "summary": "summary.json",
        "checkpoints": "checkpoints/",
    })

    def write(self, run_dir: Union[str, Path]) -> None:
        Path(run_dir, "manifest.json").write_text(
            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def read(cls, run_dir: Union[str, Path]) -> "RunManifest":
        path = Path(run_dir, "manifest.json")
        if not path.exists():
            raise TrainingError(f"no manifest in {run_dir}")
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def prepare_run_dir(run_dir: Union[str, Path], config: TrainConfig, dataset_id: str,
                    dataset_hash: str, config_path: Optional[str] = None) -> RunManifest:
    """
    Create a run directory with its manifest and config snapshot.

    The manifest is written before any training happens; on resume the stored
    dataset hash must match.

    Raises:
        TrainingError: If an existing manifest names different data
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (run_dir / "manifest.json").exists():
        previous = RunManifest.read(run_dir)
        if previous.dataset_hash != dataset_hash:
            raise TrainingError(
                f"{run_dir} was trained on dataset {previous.dataset_hash[:12]}, not {dataset_hash[:12]}"
            )
    manifest = RunManifest(
        config_path=config_path,
        config=asdict(config),
        config_hash=config_hash(config),
        dataset=dataset_id,
        dataset_hash=dataset_hash,
        seeds=[config.seed],
        source_version=source_version(),
    )
    manifest.write(run_dir)
    (run_dir / "config.cfg").write_text(dump_config(config), encoding="utf-8")
    return manifest


def load_run_data(config: TrainConfig, data_path: Optional[str] = None) -> Tuple[ImageDataset, ImageDataset, str]:
    """
    Training and held-out images for a run.

    Args:
        config: Run configuration (dataset sizes, image size, seed 0 rendering)
        data_path: SSDS file; its tail of ``test_size`` images is held out

    Returns:
        Tuple of (train, test, dataset identifier)
    """
    if data_path:
        full = load_dataset(data_path)
        if full.image_size != config.image_size:
            raise TrainingError(f"{data_path} holds {full.image_size}px images, config wants {config.image_size}")
        train, test = full.split(len(full) - config.test_size)
        return train, test, str(data_path)
    train, test = make_train_test(config.dataset_size, config.test_size, config.image_size,
                                  config.num_classes or 10, seed=0)
    return train, test, f"shapes:{config.dataset_size}+{config.test_size}@{config.image_size}"


def resolve_embedder(config: TrainConfig, train: ImageDataset, cache_dir: Union[str, Path]) -> Embedder:
    """Load the configured embedder, or fit it once and cache it next to the runs."""
    if config.embedder_path and Path(config.embedder_path).exists():
        return Embedder.load(config.embedder_path)
    cache = Path(cache_dir) / f"{config.embedder}_{train.content_hash()[:16]}.ssgn"
    if cache.exists():
        return Embedder.load(cache)
    logger.info("fitting %s embedder (cached at %s)", config.embedder, cache)
    if config.embedder == "pca_pixels":
        embedder = pca_embedder(train)
    else:
        embedder = train_classifier_embedder(train)
    cache.parent.mkdir(parents=True, exist_ok=True)
    embedder.save(cache)
    return embedder


def execute_run(config: TrainConfig, run_dir: Union[str, Path], data_path: Optional[str] = None,
                evaluate: bool = True, resume: bool = False, config_path: Optional[str] = None,
                embedder_cache: Optional[Union[str, Path]] = None) -> RunResult:
    """
    Prepare a run directory, build its evaluator and train.

    Embedders are cached in ``embedder_cache``, by default an ``embedders``
    directory next to the run.
    """
    train, test, dataset_id = load_run_data(config, data_path)
    prepare_run_dir(run_dir, config, dataset_id, train.content_hash(), config_path)
    evaluator = None
    if evaluate:
        embedder = resolve_embedder(config, train, embedder_cache or Path(run_dir).parent / "embedders")
        evaluator = Evaluator(config, train, test, embedder)
    return run_experiment(config, train, run_dir, evaluator, resume)


def load_grid(name: str, path: Union[str, Path] = GRIDS_PATH) -> List[Dict[str, Any]]:
    """
    Cells of a named sweep grid.

    Raises:
        TrainingError: If the grid is unknown
    """
    with open(path, encoding="utf-8") as handle:
        grids = yaml.safe_load(handle) or {}
    if name not in grids:
        raise TrainingError(f"unknown grid {name!r}; available: {sorted(grids)}")
    return list(grids[name]["cells"])


def _sweep_job(args: Tuple[TrainConfig, str, Optional[str], bool, str]) -> Dict[str, Any]:
    config, run_dir, data_path, evaluate, embedder_cache = args
    return execute_run(config, run_dir, data_path, evaluate, embedder_cache=embedder_cache).summary


def aggregate_cell(summaries: Dict[int, Dict[str, Any]], digest: str) -> Dict[str, Any]:
    """Mean, std and best-of-seeds per metric plus the collapse count of one cell."""
    per_seed = {
        seed: {name: stats["mean"] for name, stats in summary["metrics"].items()}
        for seed, summary in summaries.items()
    }
    per_seed = {seed: {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in m.items()}
                for seed, m in per_seed.items()}
    collapsed = sum(1 for s in summaries.values() if s.get("collapsed"))
    return summarize_runs(per_seed, digest, extra={"collapsed_runs": collapsed})


def run_sweep(base: TrainConfig, grid: str, seeds: Sequence[int], out_root: Union[str, Path],
              data_path: Optional[str] = None, workers: int = 1, evaluate: bool = True) -> Dict[str, Dict[str, Any]]:
    """
    Run every cell of a grid for every seed and aggregate per cell.

    Layout: ``<out_root>/<grid>/<cell>/seed_<s>/`` per run,
    ``<out_root>/<grid>/<cell>/aggregate.json`` per cell and one shared
    ``<out_root>/<grid>/embedders/`` cache fitted before any run starts.

    Args:
        base: Config the cell overrides are applied to
        grid: Name of a grid in grids.yaml
        seeds: Seeds run for every cell
        out_root: Output root
        data_path: Optional SSDS dataset file
        workers: Concurrent runs (1 runs sequentially)
        evaluate: Run FID/probe evaluations

    Returns:
        cell name -> aggregate summary
    """
    cells = load_grid(grid)
    root = Path(out_root) / grid
    embedder_cache = str(root / "embedders")
    jobs = []
    for cell in cells:
        cell_config = apply_overrides(base, cell.get("overrides", {}))
        if evaluate:
            # Fit shared embedders here so seed workers only ever load them.
            train, _, _ = load_run_data(cell_config, data_path)
            resolve_embedder(cell_config, train, embedder_cache)
        for seed in seeds:
            config = apply_overrides(cell_config, {"seed": seed})
            run_dir = str(root / cell["name"] / f"seed_{seed}")
            jobs.append((cell["name"], seed, (config, run_dir, data_path, evaluate, embedder_cache)))
    logger.info("sweep %s: %d cells x %d seeds", grid, len(cells), len(seeds))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, [job for _, _, job in jobs]))
    else:
        results = [_sweep_job(job) for _, _, job in jobs]

    aggregates: Dict[str, Dict[str, Any]] = {}
    for cell in cells:
        name = cell["name"]
        summaries = {seed: result for (cell_name, seed, _), result in zip(jobs, results) if cell_name == name}
        digest = config_hash(apply_overrides(base, cell.get("overrides", {})))
        aggregates[name] = aggregate_cell(summaries, digest)
        aggregates[name]["overrides"] = cell.get("overrides", {})
        write_summary(root / name / "aggregate.json", aggregates[name])
    return aggregates
