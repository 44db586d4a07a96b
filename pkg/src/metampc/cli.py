"""Command-line interface for metampc."""

import functools
import logging
from contextlib import contextmanager
from pathlib import Path

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table

from . import harness
from .config import ENVIRONMENTS, ExperimentConfig
from .errors import AcceptanceFailed, MetaMpcError
from .features import BasisSet

console = Console()

EXIT_ERROR = 1
EXIT_ACCEPTANCE = 2


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


@contextmanager
def progress_bar():
    """Yield a harness progress callback drawing a rich progress bar."""
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        console=console,
    ) as progress:
        task = progress.add_task("Starting...", total=None)

        def update(status: str, current: int, total: int) -> None:
            progress.update(task, description=status, completed=current, total=total or None)

        yield update


def config_options(command):
    """Options shared by every experiment command."""
    @click.option(
        "--config", "-c", "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="YAML configuration file",
    )
    @click.option("--seed", type=int, help="Run seed (overrides experiment.seed)")
    @click.option(
        "--out", "-o", type=click.Path(file_okay=False, path_type=Path),
        help="Output directory (overrides experiment.output_dir)",
    )
    @click.option(
        "--set", "-s", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
        help="Override one configuration key; repeatable",
    )
    @click.option("--env", type=click.Choice(ENVIRONMENTS), help="Environment (experiment.env)")
    @functools.wraps(command)
    def wrapper(config_path, seed, out, overrides, env, **kwargs):
        if env is not None:
            overrides = (f"experiment.env={env}",) + tuple(overrides)
        try:
            cfg = ExperimentConfig.load(config_path, overrides, seed, out)
        except MetaMpcError as e:
            console.print(f"[red]Configuration error:[/red] {e}")
            raise SystemExit(EXIT_ERROR)
        try:
            return command(cfg, **kwargs)
        except AcceptanceFailed as e:
            console.print(f"[red]Acceptance failed:[/red] {e}")
            raise SystemExit(EXIT_ACCEPTANCE)
        except MetaMpcError as e:
            console.print(f"[red]Error:[/red] {e}")
            raise SystemExit(EXIT_ERROR)
    return wrapper


def report_checks(checks: list[harness.CheckResult]) -> None:
    """Print acceptance results; raise AcceptanceFailed if any failed."""
    table = Table(show_header=True, header_style="bold")
    table.add_column("Check", style="cyan")
    table.add_column("Result", justify="center")
    table.add_column("Detail", style="dim")
    for check in checks:
        result = "[green]pass[/green]" if check.passed else "[red]FAIL[/red]"
        table.add_row(check.name, result, check.detail)
    console.print(Panel(table, title="Acceptance", border_style="blue"))
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise AcceptanceFailed(", ".join(failed))


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def main(verbose: bool) -> None:
    """
    Meta-learned GP residual models for adaptive MPC.

    Typical mountain-car session:

        metampc collect --out runs/mc

        metampc meta-train --out runs/mc

        metampc meta-test --out runs/mc --check

    The car uses the same commands with --env car, finishing with
    race and grip-change.
    """
    setup_logging(verbose)


@main.command()
@config_options
def collect(cfg: ExperimentConfig) -> None:
    """Record meta-training tasks with a ground-truth-model controller."""
    with progress_bar() as update:
        result = harness.collect_tasks(cfg, update)

    table = Table(show_header=True, header_style="bold")
    table.add_column("Output", style="cyan")
    table.add_column("Tasks", justify="right")
    table.add_column("Points", justify="right")
    for name, data in zip(harness.OUTPUT_NAMES[cfg.env], result.outputs):
        table.add_row(name, str(len(data.tasks)), str(data.total_points))
    console.print(Panel(table, title=f"Collected tasks ({cfg.env})", border_style="blue"))
    console.print(f"[green]Written to:[/green] {result.directory}")


@main.command("meta-train")
@config_options
@click.option("--check", is_flag=True, help="Verify the descent contract; exit 2 on failure")
def meta_train_command(cfg: ExperimentConfig, check: bool) -> None:
    """Meta-train the basis hyperparameters on the collected tasks."""
    with progress_bar() as update:
        result = harness.run_meta_train(cfg, update)

    basis = result.basis
    console.print(Panel(
        f"[bold]Basis:[/bold] {basis.kind.value}, {basis.size} functions\n"
        f"[bold]Lengthscale:[/bold] {basis.kernel.lengthscale.round(4).tolist()}\n"
        f"[bold]Signal variance:[/bold] {basis.kernel.signal_var:.4g}\n"
        f"[bold]Noise variance:[/bold] {basis.noise_var:.4g}\n"
        f"[bold]Loss:[/bold] {result.trace[0].loss:.6g} -> {result.trace[-1].loss:.6g} "
        f"in {len(result.trace) - 1} steps",
        title="Meta-training",
        border_style="blue",
    ))
    if result.holdout:
        table = Table(show_header=True, header_style="bold")
        table.add_column("Output", style="cyan")
        table.add_column("Task")
        table.add_column("Holdout RMSE", justify="right")
        for row in result.holdout:
            table.add_row(row["output"], row["task"], f"{row['rmse']:.4g}")
        console.print(table)
    console.print(f"[green]Written to:[/green] {result.directory}")
    if check:
        report_checks(harness.check_meta_train(result.trace))


@main.command("elbo-scan")
@config_options
@click.option("--param", "-p", help="Hyperparameter to scan (default experiment.scan_param)")
@click.option("--start", type=float, help="First grid value")
@click.option("--stop", type=float, help="Last grid value")
@click.option("--step", type=float, help="Grid spacing")
@click.option(
    "--basis", "basis_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Scan around this basis.json instead of the configured initial basis",
)
@click.option("--sampled", type=int, help="Estimate the likelihood term from this many samples")
@click.option("--check", is_flag=True, help="Check for two symmetric minima at +-3")
def elbo_scan_command(
    cfg: ExperimentConfig,
    param: str | None,
    start: float | None,
    stop: float | None,
    step: float | None,
    basis_path: Path | None,
    sampled: int | None,
    check: bool,
) -> None:
    """
    Evaluate the negative ELBO over a 1-D grid of one hyperparameter.

    Examples:

        metampc elbo-scan --set basis.kind=cosine --check

        metampc elbo-scan --param lengthscale --start 0.05 --stop 1 --step 0.05
    """
    e = cfg.experiment
    grid = harness.scan_grid(
        e["scan_start"] if start is None else start,
        e["scan_stop"] if stop is None else stop,
        e["scan_step"] if step is None else step,
    )
    param = param or e["scan_param"]
    samples = int(e["scan_samples"] if sampled is None else sampled)
    basis = BasisSet.load(basis_path) if basis_path else None
    with progress_bar() as update:
        result = harness.elbo_scan(cfg, param, grid, basis, samples, update)

    minima = harness.local_minima(result.values, result.losses)
    best = int(result.losses.argmin())
    console.print(Panel(
        f"[bold]Grid:[/bold] {result.values.size} values of {param}\n"
        f"[bold]Global minimum:[/bold] {result.values[best]:g} "
        f"(neg. ELBO {result.losses[best]:.6g})\n"
        f"[bold]Local minima:[/bold] {minima}",
        title="ELBO scan",
        border_style="blue",
    ))
    console.print(f"[green]Curve saved to:[/green] {result.path}")
    if check:
        report_checks(harness.check_elbo_scan(result))


@main.command("meta-test")
@config_options
@click.option("--check", is_flag=True, help="Check band coverage, fit RMSE and goal reaching")
def meta_test_command(cfg: ExperimentConfig, check: bool) -> None:
    """Adaptive MPC on the mountain-car test tasks."""
    with progress_bar() as update:
        reports = harness.meta_test(cfg, progress_callback=update)

    table = Table(show_header=True, header_style="bold")
    table.add_column("theta1", style="cyan")
    table.add_column("Fit RMSE", justify="right")
    table.add_column("In +-2 sigma", justify="right")
    table.add_column("Reached goal", justify="right")
    table.add_column("Max steps", justify="right")
    for r in reports:
        table.add_row(
            f"{r.theta1:g}",
            f"{r.rmse:.4g}",
            f"{100 * r.coverage:.1f}%",
            f"{sum(r.reached)}/{len(r.reached)}",
            str(max(r.steps_to_goal)),
        )
    console.print(Panel(table, title="Meta-test", border_style="blue"))
    if check:
        max_steps = int(cfg.data["mountain_car"]["test_steps"])
        report_checks(harness.check_meta_test(reports, max_steps))


@main.command()
@config_options
@click.option("--realizations", "-n", type=int, help="Noise realizations (experiment.realizations)")
@click.option("--check", is_flag=True, help="Check the adaptive RMSE against the baseline")
def race(cfg: ExperimentConfig, realizations: int | None, check: bool) -> None:
    """Adaptive vs non-adaptive MPCC against ground-truth MPCC on the race car."""
    if realizations is not None:
        cfg = cfg.with_overrides(f"experiment.realizations={realizations}")
    with progress_bar() as update:
        result = harness.race(cfg, progress_callback=update)

    table = Table(show_header=True, header_style="bold")
    table.add_column("Controller", style="cyan")
    table.add_column("Median", justify="right")
    table.add_column("Q1", justify="right")
    table.add_column("Q3", justify="right")
    table.add_column("Whiskers", justify="right")
    for name, report in (("adaptive", result.adaptive), ("baseline", result.baseline)):
        table.add_row(
            name,
            f"{report.median:.4g}",
            f"{report.q1:.4g}",
            f"{report.q3:.4g}",
            f"{report.whisker_low:.4g} .. {report.whisker_high:.4g}",
        )
    done = sum(result.adaptive_laps_completed)
    console.print(Panel(
        table,
        title="Position RMSE vs ground truth",
        subtitle=f"Adaptive car finished {done}/{len(result.adaptive_laps_completed)} runs",
        border_style="blue",
    ))
    console.print(f"[green]Written to:[/green] {result.directory}")
    if check:
        report_checks(harness.check_race(result))


@main.command("grip-change")
@config_options
@click.option("--factor", type=float, help="Grip factor on the changed part of the track")
@click.option("--check", is_flag=True, help="Check adaptation to the new grip")
def grip_change_command(cfg: ExperimentConfig, factor: float | None, check: bool) -> None:
    """Adaptive MPCC over several laps with reduced grip on part of the track."""
    with console.status("Driving..."):
        result = harness.grip_change_run(cfg, factor=factor)

    table = Table(show_header=True, header_style="bold")
    table.add_column("Lap", style="cyan")
    table.add_column("Half")
    table.add_column("Steps", justify="right")
    table.add_column("Prediction RMSE", justify="right")
    for h in result.halves:
        table.add_row(str(h.lap), h.half, str(h.steps), f"{h.rmse:.4g}")
    flags = ", ".join(
        f"lap {k + 1}: {'done' if c else 'not done'}{'' if b else ' (left bounds)'}"
        for k, (c, b) in enumerate(zip(result.laps_completed, result.in_bounds))
    )
    console.print(Panel(table, title="Grip change", subtitle=flags, border_style="blue"))
    console.print(f"[green]Written to:[/green] {result.directory}")
    if check:
        report_checks(harness.check_grip_change(result))


@main.command()
@click.argument("run", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("reference", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def rmse(run: Path, reference: Path) -> None:
    """
    Cumulative position RMSE of trajectory log RUN against REFERENCE.

    Example:

        metampc rmse runs/car/race/logs/r000_adaptive.csv runs/car/race/logs/r000_ground_truth.csv
    """
    try:
        value = harness.rmse_files(run, reference)
    except (MetaMpcError, ValueError, KeyError) as e:
        console.print(f"[red]Error:[/red] {e}")
        raise SystemExit(EXIT_ERROR)
    console.print(f"{value:.17g}")
