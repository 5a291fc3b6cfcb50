"""
Command-line interface for scatterwise
"""

import logging
import sys
from typing import Any, Dict, Optional

import click
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

console = Console()


def _prepare(config: str, out: Optional[str], threads: Optional[int], seed: Optional[int],
             strict_dominance: bool, verbose: bool):
    from .core.runner import load_run_config
    from .utils.helpers import set_threads, setup_logging

    setup_logging(logging.DEBUG if verbose else logging.WARNING)
    if threads is not None:
        set_threads(threads)
    return load_run_config(config, output_dir=out, seed=seed,
                           strict_dominance=strict_dominance or None)


def _fail(result: Dict[str, Any]) -> None:
    console.print(f"[red]Error: {escape(str(result.get('error', 'unknown failure')))}[/red]")
    sys.exit(result.get('exit_code', 1))


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _regime_table(regime: Dict[str, Any]) -> Table:
    table = Table(title="Far-zone regime")
    table.add_column("Check", style="cyan")
    table.add_column("Value", style="green")
    ok = regime.get('regime_ok', True)
    table.add_row("regime_ok", "[green]yes[/green]" if ok else "[red]no[/red]")
    for key in ('ka_max', 'kd_min', 'ka', 'kd', 'a_over_d', 'active_voxels'):
        if key in regime:
            table.add_row(key, _fmt(regime[key]))
    for violation in regime.get('violations') or []:
        table.add_row("violation", f"[yellow]{escape(violation)}[/yellow]")
    return table


def _common_options(func):
    func = click.option('--verbose', '-v', is_flag=True, help='Debug logging')(func)
    func = click.option('--strict-dominance', is_flag=True,
                        help='Fail instead of rerouting when the system is not diagonally dominant')(func)
    func = click.option('--seed', type=int, help='Seed for randomized particle placement')(func)
    func = click.option('--threads', type=click.IntRange(min=1), help='Worker threads for assembly')(func)
    func = click.option('--out', type=click.Path(file_okay=False), help='Output directory')(func)
    return click.argument('config', type=click.Path(exists=True, dir_okay=False))(func)


@click.group()
@click.version_option(version="0.1.0", prog_name="scatterwise")
def cli():
    """
    scatterwise - Electromagnetic scattering by many small particles

    Runs scene files (YAML or TOML) through polarizability, far-field,
    N-particle, continuum-medium and near-field computations and writes
    CSV artifacts plus a run report.
    """
    pass


@cli.command()
@_common_options
def run(config: str, out: Optional[str], threads: Optional[int], seed: Optional[int],
        strict_dominance: bool, verbose: bool):
    """Run a scene and write its artifacts and report.yaml."""
    try:
        from .core.runner import SceneRunner
        from .utils.errors import ScatterwiseError

        try:
            run_config = _prepare(config, out, threads, seed, strict_dominance, verbose)
        except ScatterwiseError as e:
            _fail(e.to_dict())

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        ) as progress:
            progress.add_task(f"Running {run_config.mode} scene...", total=None)
            result = SceneRunner(run_config).run()

        if not result['success']:
            _fail(result)

        report = result['report']
        console.print(_regime_table(report.get('regime') or {}))

        summary = Table(title="Solver")
        summary.add_column("Entry", style="cyan")
        summary.add_column("Value", style="green")
        if report.get('dominance'):
            summary.add_row("dominance bound", _fmt(report['dominance']['bound']))
        for key, value in (report.get('solver') or {}).items():
            summary.add_row(key, _fmt(value))
        for key, value in (report.get('diagnostics') or {}).items():
            if not isinstance(value, dict):
                summary.add_row(key, _fmt(value))
        console.print(summary)

        console.print(Panel(
            "\n".join(result['artifacts']),
            title=f"[green]✓ {report['mode']} run complete[/green]",
            border_style="green",
        ))

    except SystemExit:
        raise
    except Exception as e:
        console.print(f"[red]Error: {escape(str(e))}[/red]")
        sys.exit(1)


@cli.command()
@_common_options
def validate(config: str, out: Optional[str], threads: Optional[int], seed: Optional[int],
             strict_dominance: bool, verbose: bool):
    """Check regime margins, the dominance bound and memory without solving or writing."""
    try:
        from .core.runner import SceneRunner
        from .utils.errors import ScatterwiseError

        try:
            run_config = _prepare(config, out, threads, seed, strict_dominance, verbose)
        except ScatterwiseError as e:
            _fail(e.to_dict())

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        ) as progress:
            progress.add_task("Checking scene...", total=None)
            result = SceneRunner(run_config).validate()

        if not result['success']:
            _fail(result)

        console.print(f"[bold]Mode:[/bold] {result['mode']}   "
                      f"[bold]Particles:[/bold] {result['particles']}")
        console.print(_regime_table(result['regime']))

        dominance = result.get('dominance')
        if dominance is not None:
            table = Table(title="Diagonal dominance")
            table.add_column("Quantity", style="cyan")
            table.add_column("Value", style="green")
            for key in ('bound', 'bound_summed', 'bound_distance', 'min_distance'):
                table.add_row(key, _fmt(dominance.get(key)))
            table.add_row("dominant", "[green]yes[/green]" if dominance['dominant'] else "[red]no[/red]")
            console.print(table)

        megabytes = result['memory_bytes'] / 2 ** 20
        console.print(f"[dim]Estimated peak memory: {megabytes:.1f} MiB[/dim]")

    except SystemExit:
        raise
    except Exception as e:
        console.print(f"[red]Error: {escape(str(e))}[/red]")
        sys.exit(1)


def main():
    """Main entry point for the CLI."""
    try:
        cli()
    except KeyboardInterrupt:
        console.print("\n[yellow]Run cancelled by user[/yellow]")
        sys.exit(1)


if __name__ == '__main__':
    main()
