#!/usr/bin/env python3
"""
attnforge - Main Entry Point
Shared-weight self-attention toolkit

Usage:
    python run.py <command> [options]

Commands:
    audit       Parameter and MAC audit with the BERT-base reconciliation
    train       Toy-scale training run (optionally writes a checkpoint)
    sweep       Embedding-noise robustness sweep of two variants
    bench       One-block forward+backward timing per variant
    gradcheck   Finite-difference gradient checks (exit 1 on failure)
    transfer    Cross-task transfer matrix on the token tasks
    export      Checkpoint to .npz, or to an equivalent standard-attention checkpoint
    replay      Re-run a command from its manifest

Exit codes: 0 success, 1 failed check or diverged run, 2 usage or config error.
"""

import os

# Single-threaded BLAS unless the caller chose otherwise; must precede numpy.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable, Dict, List, Optional, Tuple  # noqa: E402

# Add project root to Python path
project_root = Path(__file__).parent.absolute()
sys.path.insert(0, str(project_root))

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel, ValidationError  # noqa: E402

from attention.variants import AttentionVariant  # noqa: E402
from audit.param_audit import BERT_BASE_SHAPE, audit, reconcile_bert_base  # noqa: E402
from audit.report import audit_table, audit_variants, render_audit_text  # noqa: E402
from config import __version__  # noqa: E402
from config.errors import AttnForgeError, CheckpointError, ConfigError, ContractError, InputError, RunError  # noqa: E402
from config.settings import (  # noqa: E402
    BenchConfig,
    ConfigBundle,
    GradCheckConfig,
    RunManifest,
    SweepConfig,
    TrainConfig,
    load_config,
    load_preset,
    resolve_out_dir,
)
from experiments.benchmark import bench  # noqa: E402
from experiments.gradcheck import linear_grad_check, run_grad_checks  # noqa: E402
from experiments.noise import robustness_sweep  # noqa: E402
from experiments.training import evaluate_accuracy, make_task, train  # noqa: E402
from experiments.transfer import TOKEN_TASKS, transfer_matrix  # noqa: E402
from models.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from models.encoder import convert_model  # noqa: E402
from utils.artifacts import plot_curves, read_manifest, utc_now, write_csv, write_json, write_manifest  # noqa: E402

logger = logging.getLogger("attnforge")

USAGE_ERRORS = (ConfigError, ValidationError, InputError, CheckpointError, ContractError, OSError)

DEFAULT_PRESETS = {
    "audit": "bert_base",
    "train": "tiny",
    "sweep": "tiny",
    "gradcheck": "tiny",
    "transfer": "tiny",
}


def print_banner():
    """Print application banner"""
    banner = f"""
    ╔══════════════════════════════════════════════════════════╗
    ║                                                          ║
    ║               attnforge v{__version__:<32}║
    ║                                                          ║
    ║    Shared-weight self-attention: audit, train, bench     ║
    ║                                                          ║
    ╚══════════════════════════════════════════════════════════╝
    """
    print(banner, file=sys.stderr)


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        force=True,
    )


# -- request resolution ------------------------------------------------------------

@dataclass
class Request:
    """A fully resolved command: config bundle plus command options.

    This is what a manifest stores, so a replay skips flag parsing entirely.
    """

    command: str
    bundle: ConfigBundle
    seed: int
    options: Dict[str, Any] = field(default_factory=dict)

    def to_config(self) -> Dict[str, Any]:
        return {"bundle": self.bundle.model_dump(mode="json"), "options": self.options}

    @classmethod
    def from_manifest(cls, manifest: RunManifest) -> "Request":
        return cls(
            command=manifest.command,
            bundle=ConfigBundle(**manifest.config["bundle"]),
            seed=manifest.seed,
            options=dict(manifest.config.get("options", {})),
        )


def _override(model: BaseModel, **updates: Any) -> BaseModel:
    """Re-validated copy with the non-None ``updates`` applied."""
    data = model.model_dump()
    data.update({k: v for k, v in updates.items() if v is not None})
    return type(model)(**data)


def _split(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


def _levels(value: Optional[str]) -> Optional[List[float]]:
    parts = _split(value)
    if parts is None:
        return None
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--levels must be a comma separated list of numbers, got '{value}'")


def resolve_request(args: argparse.Namespace) -> Request:
    """Merge preset, config file and flags (in that order of precedence, lowest first)."""
    command = args.command
    bundle = load_config(args.config) if args.config else ConfigBundle()
    preset = load_preset(DEFAULT_PRESETS[command]) if command in DEFAULT_PRESETS else ConfigBundle()
    seed = args.seed

    model = bundle.model or preset.model
    train_cfg = bundle.train or preset.train or TrainConfig()
    if seed is None:
        seed = train_cfg.seed
    if bundle.noise is not None:
        # a noise section sets train-time noise unless the train section already does
        explicit = bundle.train is not None and "noise_at_train" in bundle.train.model_fields_set
        train_cfg = _override(
            train_cfg,
            noise_at_train=None if explicit else bundle.noise.level,
            noise_seed=bundle.noise.seed,
        )
    options: Dict[str, Any] = {"format": args.format, "threads": args.threads}

    if command == "audit":
        variants = AttentionVariant.parse_list(args.variant or "all")
        options["variants"] = [v.value for v in variants]
        return Request(command, ConfigBundle(model=model), seed, options)

    if command in ("train", "transfer", "sweep") and model is None:
        raise ConfigError(f"'{command}' needs a model section in the config")

    if command == "train":
        model = model.with_overrides(variant=args.variant)
        train_cfg = _override(train_cfg, steps=args.steps, lr=args.lr, task=args.task, seed=seed)
        if train_cfg.task == "toy-classify":
            model = model.with_overrides(head="classify")
        options["checkpoint"] = args.checkpoint
        return Request(command, ConfigBundle(model=model, train=train_cfg), seed, options)

    if command == "transfer":
        model = model.with_overrides(variant=args.variant)
        train_cfg = _override(train_cfg, steps=args.steps, seed=seed)
        tasks = _split(args.tasks) or list(TOKEN_TASKS)
        options["tasks"] = tasks
        return Request(command, ConfigBundle(model=model, train=train_cfg), seed, options)

    if command == "sweep":
        sweep_cfg = bundle.sweep or preset.sweep or SweepConfig()
        variants = _split(args.variants)
        if variants is not None:
            if len(variants) != 2:
                raise ConfigError(f"--variants for sweep needs exactly two variants, got {variants}")
            sweep_cfg = _override(sweep_cfg, variant_a=variants[0], variant_b=variants[1])
        sweep_cfg = _override(sweep_cfg, levels=_levels(args.levels), seeds=args.seeds)
        train_cfg = _override(train_cfg, steps=args.steps, seed=seed, task=sweep_cfg.task)
        if sweep_cfg.task == "toy-classify":
            model = model.with_overrides(head="classify")
        return Request(command, ConfigBundle(model=model, train=train_cfg, sweep=sweep_cfg), seed, options)

    if command == "bench":
        bench_cfg = bundle.bench or BenchConfig()
        bench_cfg = _override(
            bench_cfg,
            variants=args.variants,
            precision=args.precision,
            trials=args.trials,
            d_model=args.d_model,
            seq_len=args.seq_len,
            batch=args.batch,
            seed=args.seed,
        )
        return Request(command, ConfigBundle(bench=bench_cfg), bench_cfg.seed, options)

    if command == "gradcheck":
        grad_cfg = bundle.gradcheck or preset.gradcheck or GradCheckConfig()
        grad_cfg = _override(grad_cfg, variants=args.variants, seed=args.seed)
        return Request(command, ConfigBundle(gradcheck=grad_cfg), grad_cfg.seed, options)

    if command == "export":
        options.update(checkpoint=args.checkpoint, to_standard=args.to_standard, output=args.output)
        return Request(command, ConfigBundle(), seed or 0, options)

    raise ConfigError(f"Unknown command: {command}")


# -- commands ------------------------------------------------------------------------

CommandResult = Tuple[int, Dict[str, Path]]


def _emit(frame: pd.DataFrame, fmt: str, text: Optional[str] = None) -> None:
    if fmt == "csv":
        print(frame.to_csv(index=False), end="")
    else:
        print(text if text is not None else frame.to_string(index=False))


def cmd_audit(request: Request, out_dir: Path) -> CommandResult:
    model = request.bundle.model
    variants = [AttentionVariant.parse(v) for v in request.options["variants"]]
    audits = audit_variants(model, variants)
    table = audit_table(audits)
    outputs = {"audit_csv": write_csv(table, out_dir / "audit.csv")}
    summary: Dict[str, Any] = {
        "model": model.model_dump(mode="json"),
        "audits": [a.to_dict() for a in audits],
    }

    text = render_audit_text(table, model)
    at_bert_base = all(getattr(model, k) == v for k, v in BERT_BASE_SHAPE.items())
    if at_bert_base:
        by_variant = {v: audit(model.with_overrides(variant=v)) for v in AttentionVariant}
        report = reconcile_bert_base(
            by_variant[AttentionVariant.STANDARD],
            by_variant[AttentionVariant.SHARED_QKV],
            others=[by_variant[AttentionVariant.SYMMETRIC], by_variant[AttentionVariant.PAIRWISE]],
        )
        recon = report.to_frame()
        outputs["reconciliation_csv"] = write_csv(recon, out_dir / "reconciliation.csv")
        summary["reconciliation"] = {
            "rows": recon.to_dict(orient="records"),
            "assumptions": report.assumptions,
        }
        text = text + "\n\n" + report.render_text()
    else:
        logger.info("Model is not at BERT-base shape; reconciliation skipped")

    outputs["audit_json"] = write_json(summary, out_dir / "audit.json", kind="audit")
    _emit(table, request.options["format"], text)
    return 0, outputs


def _resolve_path(value: str, out_dir: Path) -> Path:
    path = Path(value)
    return path if path.is_absolute() else out_dir / path


def cmd_train(request: Request, out_dir: Path) -> CommandResult:
    model_cfg, train_cfg = request.bundle.model, request.bundle.train
    result = train(train_cfg, model_cfg)
    history = result.history_frame()
    outputs = {
        "history_csv": write_csv(history, out_dir / "train_history.csv"),
        "loss_plot": plot_curves(
            history, "step", ["loss"], out_dir / "loss_curve.png",
            title=f"{model_cfg.variant.value} on {train_cfg.task}", ylabel="loss",
        ),
    }
    accuracy = evaluate_accuracy(result.params, make_task(train_cfg, result.model_config), seed=train_cfg.seed,
                                 mask_ratio=train_cfg.mask_ratio)
    initial, final = result.initial_loss, result.final_loss
    summary = {
        "variant": model_cfg.variant.value,
        "task": train_cfg.task,
        "steps": train_cfg.steps,
        "initial_loss": initial,
        "final_loss": final,
        "ln_vocab": float(np.log(model_cfg.vocab_size)),
        "loss_reduction_pct": 100.0 * (1.0 - final / initial) if initial else 0.0,
        "eval_accuracy": accuracy,
        "noise_at_train": train_cfg.noise_at_train,
        "parameters": result.params.num_parameters(),
    }
    if request.options.get("checkpoint"):
        outputs["checkpoint"] = save_checkpoint(result.params, str(_resolve_path(request.options["checkpoint"], out_dir)))
    outputs["summary_json"] = write_json(summary, out_dir / "train_summary.json", kind="train")
    _emit(pd.DataFrame([summary]), request.options["format"])
    return 0, outputs


def cmd_sweep(request: Request, out_dir: Path) -> CommandResult:
    model_cfg, train_cfg, sweep_cfg = request.bundle.model, request.bundle.train, request.bundle.sweep
    model_a = train(train_cfg, model_cfg.with_overrides(variant=sweep_cfg.variant_a)).params
    model_b = train(train_cfg, model_cfg.with_overrides(variant=sweep_cfg.variant_b)).params
    curve = robustness_sweep(
        model_a,
        model_b,
        make_task(train_cfg, model_cfg),
        sweep_cfg.levels,
        seeds=sweep_cfg.seeds,
        eval_examples=sweep_cfg.eval_examples,
        seed=request.seed,
        threads=request.options.get("threads", 1),
    )
    outputs = {
        "sweep_csv": write_csv(curve, out_dir / "sweep.csv"),
        "sweep_plot": plot_curves(
            curve.rename(columns={"acc_a": sweep_cfg.variant_a.value, "acc_b": sweep_cfg.variant_b.value}),
            "level", [sweep_cfg.variant_a.value, sweep_cfg.variant_b.value], out_dir / "robustness.png",
            title=f"Accuracy under embedding noise ({sweep_cfg.task})", ylabel="accuracy",
            xlabel="noise level (fraction of mean embedding norm)",
        ),
    }
    summary = {
        "variant_a": sweep_cfg.variant_a.value,
        "variant_b": sweep_cfg.variant_b.value,
        "task": sweep_cfg.task,
        "seeds": sweep_cfg.seeds,
        "curve": curve.to_dict(orient="records"),
    }
    outputs["sweep_json"] = write_json(summary, out_dir / "sweep.json", kind="sweep")
    _emit(curve, request.options["format"])
    return 0, outputs


def cmd_bench(request: Request, out_dir: Path) -> CommandResult:
    results = bench(request.bundle.bench)
    frame = pd.DataFrame([r.to_dict() for r in results])
    outputs = {"bench_csv": write_csv(frame, out_dir / "bench.csv")}
    summary = {
        "config": request.bundle.bench.model_dump(mode="json"),
        "results": [r.to_dict() for r in results],
        "speedup_vs_standard": {r.variant: r.speedup_vs_standard for r in results},
    }
    outputs["bench_json"] = write_json(summary, out_dir / "bench.json", kind="bench")
    _emit(frame, request.options["format"])
    return 0, outputs


def cmd_gradcheck(request: Request, out_dir: Path) -> CommandResult:
    config = request.bundle.gradcheck
    report = run_grad_checks(config)
    linear = linear_grad_check(seed=config.seed)
    frame = pd.concat([report.to_frame(), linear.to_frame()], ignore_index=True)
    passed = report.passed and linear.passed
    outputs = {"gradcheck_csv": write_csv(frame, out_dir / "gradcheck.csv")}
    summary = {
        "config": config.model_dump(mode="json"),
        "max_relative_error": report.max_relative_error,
        "linear_max_relative_error": linear.max_relative_error,
        "tolerance": config.tolerance,
        "passed": passed,
    }
    outputs["gradcheck_json"] = write_json(summary, out_dir / "gradcheck.json", kind="gradcheck")
    _emit(frame, request.options["format"])
    if not passed:
        logger.error(f"Gradient check failed: max relative error {report.max_relative_error:.3e} "
                     f"(tolerance {config.tolerance:.0e})")
        return 1, outputs
    return 0, outputs


def cmd_transfer(request: Request, out_dir: Path) -> CommandResult:
    frame = transfer_matrix(request.bundle.model, request.bundle.train, request.options["tasks"])
    outputs = {"transfer_csv": write_csv(frame, out_dir / "transfer.csv")}
    pivot = frame.pivot(index="train_task", columns="eval_task", values="accuracy")
    _emit(frame, request.options["format"], pivot.to_string())
    return 0, outputs


def cmd_export(request: Request, out_dir: Path) -> CommandResult:
    source = Path(request.options["checkpoint"])
    params = load_checkpoint(str(source))
    output = request.options.get("output")
    if request.options.get("to_standard"):
        converted = convert_model(params)
        target = _resolve_path(output or f"{source.stem}_standard.atnf", out_dir)
        save_checkpoint(converted, str(target))
    else:
        target = _resolve_path(output or f"{source.stem}.npz", out_dir)
        arrays = {name: t.data for name, t in params.named_parameters()}
        np.savez(target, __config__=np.array(params.config.model_dump_json()), **arrays)
        logger.info(f"Exported {len(arrays)} tensors to {target}")
    print(str(target))
    return 0, {"export": target}


COMMANDS: Dict[str, Callable[[Request, Path], CommandResult]] = {
    "audit": cmd_audit,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "transfer": cmd_transfer,
    "export": cmd_export,
}


def run_request(request: Request, argv: List[str], out_dir: Path) -> int:
    """Execute a resolved request and write its manifest, whatever the outcome."""
    manifest = RunManifest(
        command=request.command,
        argv=argv,
        config=request.to_config(),
        seed=request.seed,
        code_version=__version__,
        started_at=utc_now(),
    )
    exit_code = 2
    try:
        exit_code, outputs = COMMANDS[request.command](request, out_dir)
        manifest.outputs = {key: str(path) for key, path in outputs.items()}
    except RunError as e:
        logger.error(f"Run failed at step {e.step}: {e}")
        exit_code = 1
    except USAGE_ERRORS:
        exit_code = 2
        raise
    except AttnForgeError:
        exit_code = 1
        raise
    finally:
        manifest.finished_at = utc_now()
        manifest.exit_code = exit_code
        write_manifest(manifest, out_dir)
    return exit_code


def replay(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest)
    request = Request.from_manifest(manifest)
    out_dir = resolve_out_dir(args.out_dir)
    logger.info(f"Replaying '{manifest.command}' from {args.manifest} into {out_dir}")
    return run_request(request, ["replay", args.manifest], out_dir)


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: model, train, noise, bench, gradcheck, sweep)")
    common.add_argument("--seed", type=int, help="Root seed for every random stream")
    common.add_argument("--threads", type=int, default=1, help="Worker threads for sweeps (default: 1)")
    common.add_argument("--out-dir", help="Output directory (default: $ATTNFORGE_OUT_DIR or outputs/)")
    common.add_argument("--format", choices=["text", "csv"], default="text", help="Stdout format (default: text)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        description="attnforge - shared-weight self-attention toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run.py audit                                  # BERT-base audit, all variants
  python run.py audit --variant shared --format csv    # one row as CSV
  python run.py train --config config/presets/copy_task.json --variant standard
  python run.py bench --variants standard,shared
  python run.py gradcheck
  python run.py export outputs/model.atnf --to-standard
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    audit_p = sub.add_parser("audit", parents=[common], help="Parameter and MAC audit")
    audit_p.add_argument("--variant", help="Variant, comma list, or 'all' (default: all)")

    train_p = sub.add_parser("train", parents=[common], help="Toy-scale training run")
    train_p.add_argument("--variant", help="Attention variant of the model")
    train_p.add_argument("--steps", type=int, help="Optimizer steps")
    train_p.add_argument("--lr", type=float, help="Peak learning rate")
    train_p.add_argument("--task", choices=["copy", "reversal", "mlm-synthetic", "toy-classify"])
    train_p.add_argument("--checkpoint", help="Write an ATNF checkpoint of the trained model")

    sweep_p = sub.add_parser("sweep", parents=[common], help="Embedding-noise robustness sweep")
    sweep_p.add_argument("--variants", help="Two variants to compare, e.g. standard,shared")
    sweep_p.add_argument("--levels", help="Comma separated noise levels in [0, 0.4]")
    sweep_p.add_argument("--seeds", type=int, help="Noise seeds averaged per level")
    sweep_p.add_argument("--steps", type=int, help="Training steps per model")

    bench_p = sub.add_parser("bench", parents=[common], help="One-block timing benchmark")
    bench_p.add_argument("--variants", help="Comma list of variants or 'all'")
    bench_p.add_argument("--precision", choices=["float64", "float32"])
    bench_p.add_argument("--trials", type=int)
    bench_p.add_argument("--d-model", dest="d_model", type=int)
    bench_p.add_argument("--seq-len", dest="seq_len", type=int)
    bench_p.add_argument("--batch", type=int)

    grad_p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks")
    grad_p.add_argument("--variants", help="Comma list of variants or 'all' (default: all)")

    transfer_p = sub.add_parser("transfer", parents=[common], help="Cross-task transfer matrix")
    transfer_p.add_argument("--variant", help="Attention variant of the model")
    transfer_p.add_argument("--tasks", help=f"Comma list from {', '.join(TOKEN_TASKS)}")
    transfer_p.add_argument("--steps", type=int, help="Training steps per task")

    export_p = sub.add_parser("export", parents=[common], help="Export a checkpoint")
    export_p.add_argument("checkpoint", help="ATNF checkpoint to read")
    export_p.add_argument("--to-standard", action="store_true", help="Write an equivalent standard-attention checkpoint")
    export_p.add_argument("--output", help="Output file (default: derived from the checkpoint name)")

    replay_p = sub.add_parser("replay", parents=[common], help="Re-run a command from its manifest")
    replay_p.add_argument("manifest", help="Manifest JSON written by an earlier run")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    if not args.quiet:
        print_banner()

    try:
        if args.command == "replay":
            return replay(args)
        request = resolve_request(args)
        out_dir = resolve_out_dir(args.out_dir)
        return run_request(request, list(sys.argv[1:] if argv is None else argv), out_dir)
    except USAGE_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except AttnForgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n Interrupted.", file=sys.stderr)
        sys.exit(130)
