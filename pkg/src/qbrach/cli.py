"""Command-line interface: ``qbrach solve | bound | branches | verify | plot-data``.

Exit codes: 0 on success, 2 when no solution converged (or a verification
failed), 1 on usage and I/O errors.  Log verbosity is read from
``QBRACH_LOG_LEVEL`` and raised by ``-v``.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from ._io import atomic_write_text, dumps
from .bounds import estimate_Tstar
from .dynamics import read_protocol
from .liealg import format_branch_table, log_branches
from .pipeline import (ProblemError, emit_plot_data, load_problem, run_solve, scan_config,
                       verify_protocol)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_CONVERGENCE = 2
DEFAULT_MAX_NORM = 10.0

log = logging.getLogger("qbrach")


class NoConvergence(click.ClickException):
    exit_code = EXIT_NO_CONVERGENCE


def _overrides(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


def _load(problem: str, **kw):
    try:
        return load_problem(problem, **_overrides(**kw))
    except ProblemError as exc:
        raise click.UsageError(f"invalid problem file: {exc}") from None
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise click.FileError(problem, str(exc)) from None


def _problem_options(f):
    f = click.option("--E", "E", type=float, help="Energy bound ||H|| = E.")(f)
    f = click.option("--seed", "rng_seed", type=int, help="Random seed.")(f)
    return click.argument("problem")(f)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Increase log verbosity (repeatable).")
@click.version_option(package_name="artifact", prog_name="qbrach")
def cli(verbose: int):
    """Time-optimal gate synthesis by q-geodesic continuation.

    PROBLEM is a JSON problem file or the name of a bundled fixture
    (example1, cnot, su2_allowed, su2_xz).
    """
    if verbose:
        if not logging.getLogger().handlers:
            logging.basicConfig(format="%(asctime)s %(name)s %(levelname)s %(message)s")
        logging.getLogger("qbrach").setLevel(logging.INFO if verbose == 1 else logging.DEBUG)


@cli.command()
@_problem_options
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), default="qbrach_out", show_default=True,
              help="Output directory for report, paths and protocols.")
@click.option("--T-star", "T_star", type=float, help="Skip the bound scan and use this T*.")
@click.option("--q-max", "q_max", type=float, help="Final metric parameter.")
@click.option("--dq0", type=float, help="Initial continuation step.")
@click.option("--max-shift", type=int, help="Logarithm branch shifts per eigenvalue.")
@click.option("--max-branches", type=int, help="Solve at most this many branches.")
@click.option("--continuation-tol", type=float, help="Integrator tolerance during continuation.")
@click.option("--workers", type=int, default=0, show_default=True,
              help="Worker processes for branch solves (0 = all cores, 1 = sequential with pruning).")
def solve(problem, E, rng_seed, out_dir, T_star, q_max, dq0, max_shift, max_branches, continuation_tol, workers):
    """Run the full pipeline and write the best protocol."""
    spec = _load(problem, E=E, rng_seed=rng_seed, T_star=T_star, q_max=q_max, dq0=dq0, max_shift=max_shift,
                 max_branches=max_branches, continuation_tol=continuation_tol)
    out = Path(out_dir)
    report = run_solve(spec, out, workers=None if workers == 0 else workers,
                       progress=lambda oc: click.echo(f"branch {oc.branch_index}: {oc.status}"
                                                      + (f" T={oc.T:.6f}" if oc.T is not None else ""), err=True))
    click.echo(f"T* = {report.T_star:.6f} ({report.T_star_source}); {len(report.branches)} branches")
    if not report.converged:
        raise NoConvergence(f"no branch converged; see {out / 'report.json'}")
    b = report.best
    click.echo(f"best: branch {b['branch_index']}  T = {b['T']:.10f}/E  infidelity = {b['infidelity']:.3e}")
    click.echo(f"protocol: {out / 'protocol.csv'}")


@cli.command()
@_problem_options
@click.option("--t-min", type=float, help="Lower end of the scan.")
@click.option("--t-max", type=float, help="Upper end of the scan.")
@click.option("--step", type=float, help="Scan step.")
@click.option("--segments", type=int, help="Piecewise-constant segments.")
@click.option("--restarts", type=int, help="Random restarts per T.")
@click.option("-o", "--out", "out", type=click.Path(dir_okay=False), help="Write the scan table as CSV.")
def bound(problem, E, rng_seed, t_min, t_max, step, segments, restarts, out):
    """Estimate the upper bound T* by fixed-time fidelity optimization."""
    spec = _load(problem, E=E, rng_seed=rng_seed, bound_t_min=t_min, bound_t_max=t_max, bound_step=step,
                 bound_segments=segments, bound_restarts=restarts)
    res = estimate_Tstar(spec.split, spec.target, spec.E, scan_config(spec))
    if out:
        rows = ["T,best_fidelity,stage"] + [f"{format(t, '.17g')},{format(f, '.17g')},{s}" for t, f, s in res.table]
        atomic_write_text(out, "\n".join(rows) + "\n")
    else:
        for t, f, s in res.table:
            click.echo(f"{s:>6}  T={t:.4f}  F={f:.6f}")
    click.echo(f"T* = {res.T_star:.6f}/E" + ("" if res.confident else "  (scan exhausted, low confidence)"))
    if not res.confident:
        raise NoConvergence("no scanned time reached the fidelity threshold")


@cli.command()
@_problem_options
@click.option("--max-norm", type=float, help="List branches below this norm (default: E T* (1 + margin), T* from the file or its scan range).")
@click.option("--max-shift", type=int, help="Logarithm branch shifts per eigenvalue.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of a table.")
def branches(problem, E, rng_seed, max_norm, max_shift, as_json):
    """List the logarithm branches of the target (no continuation)."""
    spec = _load(problem, E=E, rng_seed=rng_seed, max_shift=max_shift)
    if max_norm is None:
        horizon = spec.T_star if spec.T_star is not None else spec.bound_t_max
        max_norm = spec.E * horizon * (1 + spec.margin) if horizon is not None else DEFAULT_MAX_NORM
    seeds = log_branches(spec.target, spec.split, max_norm=max_norm, max_shift=spec.max_shift)
    if as_json:
        click.echo(dumps([{"branch_index": s.branch_index, "hs_norm": s.hs_norm, "sector": s.sector,
                           "alpha": [s.phase_sector.real, s.phase_sector.imag],
                           "coeffs": s.coeffs.tolist(), "labels": list(spec.split.labels)} for s in seeds]))
    else:
        click.echo(format_branch_table(seeds))


@cli.command()
@click.argument("protocol", type=click.Path(exists=True, dir_okay=False))
@click.argument("problem")
@click.option("--interpolation", type=click.Choice(["cubic", "previous"]), default="cubic", show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit the report as JSON.")
def verify(protocol, problem, interpolation, as_json):
    """Replay an exported PROTOCOL against PROBLEM's target."""
    spec = _load(problem)
    try:
        rep = verify_protocol(protocol, spec, interpolation)
    except (ValueError, KeyError) as exc:
        raise click.UsageError(f"cannot verify {protocol}: {exc}") from None
    if as_json:
        click.echo(dumps(rep.to_json()))
    else:
        click.echo(f"fidelity {rep.fidelity:.15f}  infidelity {rep.infidelity:.3e}  T {rep.T:.10f}")
        click.echo(f"norm drift {rep.norm_drift:.3e}  QBE residual {rep.qbe_residual:.3e}")
        for flag in rep.flags:
            click.echo(f"FLAG: {flag}")
    if not rep.ok:
        raise NoConvergence("verification failed")


@cli.command("plot-data")
@click.argument("protocol", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", "out", type=click.Path(dir_okay=False), required=True, help="CSV to write.")
@click.option("--problem", help="Problem file, required for the geodesic overlay.")
@click.option("--overlay", "overlay", type=click.Path(exists=True, dir_okay=False),
              help="Branch path checkpoint (paths/branch_m.json); its last geodesic is overlaid.")
@click.option("--tol", type=float, default=1e-6, show_default=True, help="Tolerance for coinciding curves.")
def plot_data(protocol, out, problem, overlay, tol):
    """Write control curves (and an optional geodesic overlay) for plotting."""
    from .continuation import QPath

    prot = read_protocol(protocol)
    kw = {}
    if overlay:
        if not problem:
            raise click.UsageError("--overlay needs --problem")
        path = QPath.load(overlay)
        kw = dict(split=_load(problem).split, overlay_h0=path.last.h0, overlay_q=path.last.q)
    summary = emit_plot_data(prot, out, tol=tol, **kw)
    click.echo(f"{len(summary['coinciding_pairs'])} coinciding pairs {summary['coinciding_pairs']}; "
               f"{summary['distinct_curves']} distinct curves")


def main(argv=None) -> int:
    """Entry point returning the process exit code."""
    try:
        cli.main(args=argv, prog_name="qbrach", standalone_mode=False)
    except NoConvergence as exc:
        exc.show()
        return EXIT_NO_CONVERGENCE
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except OSError as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
