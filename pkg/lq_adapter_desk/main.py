"""
LQ-Adapter desk CLI - learnable-query adapter around a frozen ViT

Commands:
- synth-data: Write a synthetic single-lesion speckle dataset
- train: Train the adapter, keep the best-validation checkpoint
- eval: Score a checkpoint on a dataset, write a JSON report
- gradcheck: Compare tape gradients with central finite differences
- param-count: Trainable/frozen parameter accounting
- ablate: Learnable-query block sweep and query-init comparison
"""

import json
import logging
import sys
from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .engine.errors import ConfigError, DataError, LQAdapterError, NumericalError
from .engine.settings import get_gradcheck_points, get_log_level

app = typer.Typer()

console = Console()
err_console = Console(stderr=True)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# typer may ship its own click; take the base class from the exceptions it raises.
_UsageFailure = next(cls for cls in typer.BadParameter.__mro__ if cls.__name__ == "ClickException")


@lru_cache(maxsize=1)
def _load_manifest() -> dict:
    """Load the JSON manifest from disk, favoring the packaged copy."""
    package_manifest = Path(__file__).resolve().parent / "manifest.json"
    repo_manifest = package_manifest.parent.parent / "manifest.json"

    for candidate in (package_manifest, repo_manifest):
        if candidate.exists():
            with candidate.open(encoding="utf-8") as handle:
                return json.load(handle)

    raise FileNotFoundError("manifest.json not found alongside package or in project root")


def _should_emit_manifest(argv: list[str]) -> bool:
    """Return True when CLI should output the manifest instead of help text."""
    return len(argv) == 2 and argv[1] in ("-h", "--help")


def _print_manifest() -> None:
    print(json.dumps(_load_manifest(), indent=2))


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2))


def _fail(exc: Exception, code: int) -> None:
    err_console.print(f"[red]Error:[/red] {exc}")
    raise typer.Exit(code=code)


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map engine errors onto the CLI exit codes."""
    try:
        yield
    except DataError as exc:
        _fail(exc, EXIT_DATA)
    except NumericalError as exc:
        _fail(exc, EXIT_NUMERICAL)
    except (ConfigError, LQAdapterError) as exc:
        _fail(exc, EXIT_USAGE)


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        console=err_console,
    )


def _progress_callback(progress: Progress, task):
    def callback(current: int, total: int, message: str) -> None:
        progress.update(task, completed=current, total=total, description=f"[cyan]{message}[/cyan]")

    return callback


@app.callback()
def main() -> None:
    """Learnable-query adapter: synthetic data, training, evaluation and checks."""
    with _exit_codes():
        level = get_log_level()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@app.command("synth-data")
def synth_data(
    n: int = typer.Option(..., "--n", help="Number of images"),
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    size: int = typer.Option(64, "--size", help="Image side in pixels (multiple of 32)"),
    out: str = typer.Option(..., "--out", "-o", help="Output directory"),
    contrast: float = typer.Option(0.4, "--contrast", help="Lesion/background intensity ratio"),
):
    """
    Write a synthetic speckle dataset with one dark ellipse per image.
    """
    from .engine.synthetic import gen_synthetic

    with _exit_codes(), _progress() as progress:
        task = progress.add_task("Rendering...", total=n)
        manifest = gen_synthetic(
            n, seed, size, Path(out), contrast, progress_callback=_progress_callback(progress, task)
        )

    _emit({"manifest": str(manifest), "count": n})


@app.command()
def train(
    config_path: Optional[str] = typer.Option(None, "--config", "-c", help="JSON config (desk defaults if omitted)"),
    data: str = typer.Option(..., "--data", "-d", help="Dataset manifest or directory"),
    out: str = typer.Option(..., "--out", "-o", help="Checkpoint directory"),
):
    """
    Train the adapter on a dataset; the best-validation-mIoU checkpoint is kept.
    """
    from .engine.dataset import load_dataset
    from .engine.models import load_config
    from .engine.training import HISTORY_FILE, train as train_model

    with _exit_codes():
        config = load_config(Path(config_path) if config_path else None)
        samples = load_dataset(Path(data))
        with _progress() as progress:
            task = progress.add_task("Training...", total=None)
            result = train_model(config, samples, Path(out), progress_callback=_progress_callback(progress, task))

    _emit(
        {
            "checkpoint": result.checkpoint,
            "history": str(Path(out) / HISTORY_FILE),
            "best_epoch": result.best_epoch,
            "best_miou": result.best_miou,
            "initial_miou": result.history[0].val_miou,
            "frozen_checksum": result.frozen_checksum,
        }
    )


@app.command("eval")
def eval_checkpoint(
    checkpoint: str = typer.Option(..., "--checkpoint", help="Checkpoint directory or manifest"),
    data: str = typer.Option(..., "--data", "-d", help="Dataset manifest or directory"),
    report: str = typer.Option(..., "--report", "-r", help="Path of the JSON report to write"),
    config_path: Optional[str] = typer.Option(
        None, "--config", "-c", help="Config whose architecture the checkpoint must match"
    ),
):
    """
    Evaluate a checkpoint; writes the full MetricsReport as JSON.
    """
    from .engine.checkpoint import load_checkpoint
    from .engine.dataset import load_dataset, write_atomic
    from .engine.models import load_config
    from .engine.training import evaluate

    with _exit_codes():
        config = load_config(Path(config_path)) if config_path else None
        model = load_checkpoint(Path(checkpoint), config)
        samples = load_dataset(Path(data))
        metrics = evaluate(model, samples)
        write_atomic(Path(report), (metrics.model_dump_json(indent=2) + "\n").encode("utf-8"))

    summary = metrics.model_dump(exclude={"per_sample_iou", "predictions"})
    summary["report"] = report
    summary["samples"] = len(samples)
    _emit(summary)


@app.command()
def gradcheck(
    config_path: Optional[str] = typer.Option(
        None, "--config", "-c", help="JSON config (smallest three-scale geometry if omitted)"
    ),
    size: int = typer.Option(32, "--size", help="Image size of the built-in D=8 geometry, a multiple of 32"),
    tol: float = typer.Option(1e-4, "--tol", help="Maximum relative error"),
    seed: int = typer.Option(0, "--seed", help="Seed for gates, image and sampled coordinates"),
    format: str = typer.Option("json", "--format", "-f", help="Output format: json, table"),
):
    """
    Check every trainable parameter's gradient against central differences.

    Zero-initialized gates and queries are randomized first so every path
    carries gradient. Coordinates per tensor: LQ_ADAPTER_GRADCHECK_POINTS.
    """
    from .engine.adapter import LQAdapterModel
    from .engine.gradcheck import check_model, desk_gradcheck_config, perturb_gates
    from .engine.models import load_config
    from .engine.tensor import Tensor

    with _exit_codes():
        config = load_config(Path(config_path)) if config_path else desk_gradcheck_config(size)
        points = get_gradcheck_points()
        model = perturb_gates(LQAdapterModel.create(config), seed)
        rng = np.random.default_rng(seed)
        image = Tensor(rng.uniform(size=(1, config.image_size, config.image_size)))
        with _progress() as progress:
            task = progress.add_task("Checking gradients...", total=None)
            results = check_model(
                model, image, points=points, tol=tol, seed=seed,
                progress_callback=_progress_callback(progress, task),
            )

    failed = [r for r in results if not r.passed]
    if format == "table":
        table = Table(title="Gradient check")
        table.add_column("Parameter", style="cyan")
        table.add_column("Points", justify="right")
        table.add_column("Max rel. error", justify="right")
        table.add_column("OK", style="green")
        for r in results:
            table.add_row(r.name, str(r.checked), f"{r.max_rel_error:.2e}", "yes" if r.passed else "[red]no[/red]")
        console.print(table)
    else:
        _emit(
            {
                "passed": not failed,
                "tol": tol,
                "tensors": len(results),
                "max_rel_error": max((r.max_rel_error for r in results), default=0.0),
                "failed": {r.name: r.max_rel_error for r in failed},
            }
        )
    if failed:
        raise typer.Exit(code=EXIT_NUMERICAL)


@app.command("param-count")
def param_count(
    config_path: Optional[str] = typer.Option(None, "--config", "-c", help="JSON config (desk defaults if omitted)"),
    format: str = typer.Option("json", "--format", "-f", help="Output format: json, table"),
):
    """
    Count trainable and frozen parameters, split by component.
    """
    from .engine.adapter import LQAdapterModel, count_by_component
    from .engine.adapter import param_count as count_params
    from .engine.models import load_config

    with _exit_codes():
        config = load_config(Path(config_path) if config_path else None)
        model = LQAdapterModel.create(config)
        trainable, frozen = count_params(model)
        components = count_by_component(model.params)

    if format == "table":
        table = Table(title="Parameters")
        table.add_column("Component", style="cyan")
        table.add_column("Count", style="green", justify="right")
        for name, count in components.items():
            table.add_row(name, f"{count:,}")
        table.add_row("trainable", f"{trainable:,}")
        table.add_row("frozen", f"{frozen:,}")
        console.print(table)
    else:
        _emit({"trainable": trainable, "frozen": frozen, "total": trainable + frozen, "components": components})


@app.command()
def ablate(
    config_path: Optional[str] = typer.Option(None, "--config", "-c", help="Base JSON config"),
    data: str = typer.Option(..., "--data", "-d", help="Dataset manifest or directory"),
    out: str = typer.Option(..., "--out", "-o", help="Directory for per-run checkpoints and the report"),
    seeds: Optional[List[int]] = typer.Option(None, "--seed", help="Seed; repeat for several (default 0,1,2)"),
    blocks: Optional[List[int]] = typer.Option(
        None, "--blocks", help="Leading blocks with queries; repeat for several (default 0,1,2,4)"
    ),
    compare_init: bool = typer.Option(True, "--init/--no-init", help="Also compare zero vs random query init"),
    format: str = typer.Option("json", "--format", "-f", help="Output format: json, table"),
):
    """
    Train the learnable-query ablations and report median validation mIoU.
    """
    from .engine.ablation import DEFAULT_BLOCK_COUNTS, run_ablation
    from .engine.dataset import load_dataset, write_atomic
    from .engine.models import load_config

    out_dir = Path(out)
    report_path = out_dir / "ablation.json"
    with _exit_codes():
        config = load_config(Path(config_path) if config_path else None)
        samples = load_dataset(Path(data))
        with _progress() as progress:
            task = progress.add_task("Ablating...", total=None)
            report = run_ablation(
                config,
                samples,
                out_dir,
                seeds=seeds or (0, 1, 2),
                counts=blocks or DEFAULT_BLOCK_COUNTS,
                compare_init=compare_init,
                progress_callback=_progress_callback(progress, task),
            )
        write_atomic(report_path, (report.model_dump_json(indent=2) + "\n").encode("utf-8"))

    if format == "table":
        table = Table(title="Median validation mIoU")
        table.add_column("Variant", style="cyan")
        table.add_column("mIoU", style="green", justify="right")
        for name, miou in {**report.block_sweep, **report.init_comparison}.items():
            table.add_row(name, f"{miou:.4f}")
        console.print(table)
    else:
        _emit({"report": str(report_path), **report.model_dump(exclude={"runs"})})


def run() -> None:
    """CLI entry point that handles manifest-aware help output and exit codes."""
    if _should_emit_manifest(sys.argv):
        _print_manifest()
        return
    try:
        code = app(standalone_mode=False)
    except _UsageFailure as exc:
        exc.show()
        code = EXIT_USAGE
    except typer.Abort:
        code = EXIT_USAGE
    sys.exit(code or 0)


if __name__ == "__main__":
    run()
