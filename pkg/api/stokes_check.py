# api/stokes_check.py
import click
import numpy as np

from api.common import command_errors, finish
from services.discrete_sim import Grid1D, discrete_stokes_check

STOKES_TOLERANCE = 1e-13


@click.command("stokes-check")
@click.option("--nx", type=click.IntRange(min=3), multiple=True, default=(16, 64, 256), show_default=True,
              help="Grid sizes (repeatable)")
@click.option("--trials", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@command_errors
def stokes_check(nx, trials: int, seed: int):
    """Σ W Dω = ω_N − ω_1 on random vectors, within 1e-13·‖ω‖∞·N."""
    rng = np.random.default_rng(seed)
    failed = False
    for n in nx:
        grid = Grid1D(n=n)
        worst = 0.0
        for _ in range(trials):
            omega = rng.standard_normal(n)
            bound = STOKES_TOLERANCE * float(np.max(np.abs(omega))) * n
            worst = max(worst, abs(discrete_stokes_check(grid, omega)) / bound)
        ok = worst <= 1.0
        failed = failed or not ok
        click.echo(f"{'PASS' if ok else 'FAIL'} discrete Stokes N={n}: max defect {worst:.3e} of the bound")
    finish(failed)
