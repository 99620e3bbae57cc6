"""Command-line entry point for datasets, training runs, sweeps and evaluation.

Usage:
    python cli.py gen-data --out shapes.ssds --n 30000
    python cli.py train --config run.cfg --seed 1 --out runs/a
    python cli.py sweep --grid robustness --seeds 1,2,3
    python cli.py fid --a shapes.ssds --b runs/a/checkpoints/step_0010000.ssgn
    python cli.py probe --run runs/a --out runs/a_probe.csv
    python cli.py forgetting --seeds 1,2,3 --out forgetting/
    python cli.py report --runs runs --out report/
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch
from dotenv import load_dotenv

from config import ConfigError, SSGANError, TrainConfig, apply_overrides, load_config, output_root
from data import ImageDataset, load_dataset, save_dataset, synthetic_shapes_dataset
from evaluation import (
    Embedder,
    ForgettingConfig,
    ProbeProtocol,
    classifier_accuracy,
    compute_fid,
    forgetting_experiment,
    forgetting_summary,
    generated_images,
    pca_embedder,
    probe_discriminator,
    probe_over_training,
    read_curve_csv,
    train_classifier_embedder,
    write_curve_csv,
    write_summary,
)
from models import build_models, load_checkpoint, load_named_state
from training import RunManifest, checkpoint_paths, execute_run, load_run_data, run_sweep

load_dotenv()

logger = logging.getLogger(__name__)

BANNER = "=" * 70


class UsageError(SSGANError):
    """Raised for unknown flags and malformed arguments."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises instead of exiting."""

    def error(self, message: str) -> None:
        raise UsageError(message)


def _banner(title: str) -> None:
    print(BANNER)
    print(title)
    print(BANNER)


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values that override config-file keys."""
    values: Dict[str, Any] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "variant", None):
        values["variant"] = args.variant.replace("-", "_")
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        values["total_steps"] = args.steps
    return values


def _config(args: argparse.Namespace) -> TrainConfig:
    overrides = _overrides(args)
    if args.config:
        return load_config(args.config, overrides)
    return apply_overrides(TrainConfig(), overrides)


def _load_source(path: str, samples: int) -> torch.Tensor:
    """Images from a dataset file or samples from a training checkpoint."""
    if path.endswith(".ssgn"):
        tensors = load_checkpoint(path)
        run_dir = Path(path).resolve().parent.parent
        config = load_config(str(run_dir / "config.cfg"))
        channels = tensors["generator/conv_out.weight"].shape[0]
        gen, _ = build_models(config, channels, config.num_classes)
        load_named_state(gen, "generator", tensors)
        return generated_images(gen, samples, config.seed, config.num_classes)
    return load_dataset(path).images


def _dataset_arg(path: Optional[str], size: int = 32, n: int = 20000) -> ImageDataset:
    if path:
        return load_dataset(path)
    return synthetic_shapes_dataset(n, size)


def cmd_gen_data(args: argparse.Namespace) -> int:
    dataset = synthetic_shapes_dataset(args.n, args.size, args.classes, args.seed)
    save_dataset(dataset, args.out)
    print(f"✅ Wrote {len(dataset)} images ({args.size}x{args.size}, {args.classes} classes) to {args.out}")
    print(f"   content hash: {dataset.content_hash()}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    run_dir = Path(args.out) if args.out else output_root() / f"{config.variant}_seed{config.seed}"
    _banner(f"Training {config.variant} (seed {config.seed}, {config.total_steps} steps) -> {run_dir}")
    result = execute_run(config, run_dir, args.data, evaluate=not args.no_eval,
                         resume=args.resume, config_path=args.config)
    fid = result.summary["metrics"].get("fid", {}).get("mean")
    print(f"✅ Finished {len(result.records)} logged steps, {len(result.checkpoints)} checkpoints")
    if fid is not None:
        print(f"   final FID: {fid:.3f}")
    if result.summary.get("collapsed"):
        print("❌ Run collapsed (FID blew up relative to its running minimum)")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _config(args)
    seeds = _seeds(args.seeds)
    out_root = output_root(args.out)
    _banner(f"Sweep {args.grid}: variant {base.variant}, seeds {seeds} -> {out_root / args.grid}")
    aggregates = run_sweep(base, args.grid, seeds, out_root, args.data, args.workers, not args.no_eval)
    for name, aggregate in aggregates.items():
        fid = aggregate["metrics"].get("fid", {})
        if fid.get("n"):
            print(f"   {name:24s} FID {fid['mean']:8.3f} ± {fid['std']:.3f} (best {fid['best']:.3f}), "
                  f"collapsed {aggregate['collapsed_runs']}")
        else:
            print(f"   {name:24s} done")
    return 0


def cmd_fid(args: argparse.Namespace) -> int:
    images_a = _load_source(args.a, args.samples)
    images_b = _load_source(args.b, args.samples)
    if args.embedder_path:
        embedder = Embedder.load(args.embedder_path)
        print(f"   embedder: {embedder.kind} from {args.embedder_path}")
    else:
        embedder = pca_embedder(ImageDataset(images_a), args.pca_dim)
        print(f"   embedder: pca_pixels fitted on {args.a} (pass --embedder-path for frozen_classifier)")
    result = compute_fid(images_a, images_b, embedder)
    print(json.dumps({
        "fid": result.value,
        "regularized": result.regularized,
        "embedder": embedder.kind,
        "n_a": images_a.shape[0],
        "n_b": images_b.shape[0],
    }))
    return 0


def _manifest_data(run_dir: Path) -> Optional[str]:
    """Dataset file a run was trained on, or None for rendered shapes."""
    dataset = RunManifest.read(run_dir).dataset
    return None if dataset.startswith("shapes:") else dataset


def cmd_probe(args: argparse.Namespace) -> int:
    if not args.checkpoint and not args.run:
        raise UsageError("probe needs --checkpoint or --run")
    run_dir = Path(args.run) if args.run else Path(args.checkpoint).resolve().parent.parent
    config = load_config(str(run_dir / "config.cfg"))
    train, test, _ = load_run_data(config, args.data or _manifest_data(run_dir))
    train = train.split(min(config.probe_train_size, len(train) - 1))[0]
    test = test.split(min(config.probe_test_size, len(test) - 1))[0]
    protocol = ProbeProtocol(epochs=args.epochs or config.probe_epochs, seed=config.seed)

    if args.checkpoint:
        tensors = load_checkpoint(args.checkpoint)
        _, disc = build_models(config, train.channels, train.num_classes)
        load_named_state(disc, "discriminator", tensors)
        result = probe_discriminator(disc, train, test, protocol)
        print(json.dumps({"step": int(tensors["run/step"].item()), **result.row()}))
        return 0

    fids = {}
    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        fids = {row["step"]: row["fid"] for row in read_curve_csv(metrics_path) if row.get("fid") is not None}
    rows = probe_over_training(checkpoint_paths(run_dir), config, train, test, protocol, fids)
    out = Path(args.out) if args.out else run_dir.parent / f"{run_dir.name}_probe.csv"
    write_curve_csv(out, rows)
    print(f"✅ Probed {len(rows)} checkpoints -> {out}")
    return 0


def cmd_forgetting(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves_by_seed = {}
    for seed in _seeds(args.seeds):
        config = ForgettingConfig(period=args.period, n_tasks=args.tasks, cycles=args.cycles, seed=seed)
        _banner(f"Forgetting, seed {seed}: {config.n_tasks} tasks x {config.cycles} cycles, period {config.period}")
        curves = forgetting_experiment(config)
        for variant, curve in curves.items():
            write_curve_csv(out / f"{variant}_seed{seed}.csv", curve.rows())
            print(f"   {variant:16s} cycle means {['%.4f' % m for m in curve.cycle_means]}")
        curves_by_seed[seed] = curves
    write_summary(out / "summary.json", forgetting_summary(curves_by_seed))
    print(f"✅ Wrote curves and summary to {out}")
    return 0


def _run_dirs(root: Path) -> List[Path]:
    return sorted(p.parent for p in root.rglob("manifest.json"))


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs, curves = [], []
    for run_dir in _run_dirs(root):
        summary_path = run_dir / "summary.json"
        if not summary_path.exists():
            logger.warning("skipping unfinished run %s", run_dir)
            continue
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        name = str(run_dir.relative_to(root))
        row: Dict[str, Any] = {
            "run": name,
            "variant": summary.get("variant"),
            "seed": summary["seeds"][0] if summary.get("seeds") else None,
            "config_hash": summary.get("config_hash"),
            "steps": summary.get("steps"),
            "collapsed": summary.get("collapsed"),
        }
        for metric, stats in sorted(summary["metrics"].items()):
            row[metric] = stats.get("mean")
        runs.append(row)
        for record in read_curve_csv(run_dir / "metrics.csv"):
            if record.get("fid") is not None or any(
                    v is not None for k, v in record.items() if k.startswith("probe_block")):
                curves.append({"run": name, **record})
    if not runs:
        raise SSGANError(f"no finished runs under {root}")
    columns = sorted({k for r in runs for k in r}, key=lambda k: (k not in ("run", "variant", "seed"), k))
    write_curve_csv(out / "runs.csv", runs, columns)
    curve_columns = sorted({k for r in curves for k in r}, key=lambda k: (k not in ("run", "step"), k))
    write_curve_csv(out / "curves.csv", curves, curve_columns)
    print(f"✅ Reported {len(runs)} runs -> {out / 'runs.csv'}, {out / 'curves.csv'}")
    return 0


def cmd_train_embedder(args: argparse.Namespace) -> int:
    dataset = _dataset_arg(args.data, args.size)
    if args.kind == "pca_pixels":
        embedder = pca_embedder(dataset, args.pca_dim)
    else:
        train, test = dataset.split(int(len(dataset) * 0.9))
        embedder = train_classifier_embedder(train, epochs=args.epochs, seed=args.seed)
        print(f"   held-out accuracy: {classifier_accuracy(embedder, test):.4f}")
    embedder.save(args.out)
    print(f"✅ Saved {embedder.kind} embedder (dim {embedder.dim}) to {args.out}")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--variant", choices=["uncond", "ssgan", "ssgan-sbn", "cond", "rot-only"],
                        help="Model variant (overrides the config file)")
    parser.add_argument("--steps", type=int, help="Total training steps")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override any config key (repeatable)")
    parser.add_argument("--data", help="SSDS dataset file (default: render synthetic shapes)")
    parser.add_argument("--no-eval", action="store_true", help="Skip FID and probe evaluations")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(description="Self-supervised GAN experiments")
    parser.add_argument("--log-level", default=os.getenv("SSGAN_LOG_LEVEL", "INFO"),
                        help="Logging level (default: SSGAN_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen-data", help="Render the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=30000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="Train one run")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="Run directory (default: $SSGAN_OUT/<variant>_seed<seed>)")
    p.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sweep", help="Run a grid from grids.yaml over seeds")
    _add_config_flags(p)
    p.add_argument("--grid", required=True, choices=["robustness", "alpha"])
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", help="Output root (default: $SSGAN_OUT or ./runs)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("fid", help="FID between two dataset/checkpoint sources")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--samples", type=int, default=10000, help="Samples drawn from checkpoint sources")
    p.add_argument("--embedder-path", help="Saved embedder (default: PCA fitted on source a)")
    p.add_argument("--pca-dim", type=int, default=64)
    p.set_defaults(handler=cmd_fid)

    p = sub.add_parser("probe", help="Linear-probe discriminator checkpoints")
    p.add_argument("--checkpoint", help="Single checkpoint (prints JSON)")
    p.add_argument("--run", help="Run directory (probes every checkpoint into a CSV)")
    p.add_argument("--data", help="SSDS dataset file the run was trained on")
    p.add_argument("--epochs", type=int, help="Probe epochs (default: config probe_epochs)")
    p.add_argument("--out", help="CSV path for --run")
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("forgetting", help="Cycling 1-vs-all task experiment")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--period", type=int, default=1000)
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_forgetting)

    p = sub.add_parser("report", help="Aggregate run directories into CSV tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("train-embedder", help="Fit and store an FID embedder")
    p.add_argument("--data", help="SSDS dataset file (default: synthetic shapes)")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--kind", choices=["frozen_classifier", "pca_pixels"], default="frozen_classifier")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--pca-dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_embedder)
    return parser


def _error_line(exc: Exception) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and dispatch to a subcommand.

    Returns:
        0 on success, 2 for usage and config errors, 1 for runtime errors
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _error_line(exc)
        return 2
    level = getattr(logging, args.log_level.upper(), None)
    if not isinstance(level, int):
        _error_line(UsageError(f"unknown log level: {args.log_level}"))
        return 2
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.handler(args)
    except (UsageError, ConfigError) as exc:
        _error_line(exc)
        return 2
    except (SSGANError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        _error_line(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
