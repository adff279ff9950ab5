"""Operator CLI: verification runs, sweeps, benchmarks, tuning, table checks.

Exit codes: 0 on success, 1 when a verification check fails, 2 for usage
or configuration errors (unknown profiles, malformed inputs).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import __version__
from .batch import WorkloadCase
from .engine import BlockParams
from .errors import ParseError
from .perfmodel import check_bundled_tables, check_tables, load_manifest
from .reporting import (
    ABLATION_NAMES,
    SWEEP_WORKLOADS,
    load_model_profile,
    render_figure,
    report_csv,
    report_json,
    sweep,
    write_report,
)
from .simulator import load_profile
from .tuner import (
    TuningKey,
    default_search_space,
    load_table,
    lookup as lookup_params,
    pretuned_table,
    save_table,
    tune as run_tune,
)
from .verification import run_matrix

_CASES = {
    "decode": WorkloadCase.DECODE_ONLY,
    "prefill": WorkloadCase.PREFILL_ONLY,
    "mixed": WorkloadCase.MIXED,
}


def _hw_profile(spec):
    try:
        return load_profile(spec)
    except (FileNotFoundError, ParseError, ValueError) as exc:
        raise click.UsageError(f"hardware profile {spec!r}: {exc}")


def _model_profile(spec):
    try:
        return load_model_profile(spec)
    except (FileNotFoundError, ParseError, ValueError) as exc:
        raise click.UsageError(f"model profile {spec!r}: {exc}")


def _tuning_table(path):
    if path is None:
        return pretuned_table()
    try:
        return load_table(path)
    except ParseError as exc:
        raise click.UsageError(str(exc))


model_option = click.option("--model", default="llama3-8b", show_default=True,
                            help="Model profile name or JSON path.")
hw_option = click.option("--hw", default="tpu7x", show_default=True,
                         help="Hardware profile name or JSON path.")
seed_option = click.option("--seed", default=42, show_default=True, type=int)


@click.group()
@click.version_option(__version__, prog_name="rpakit")
def main():
    """Paged-attention reference engine, simulator, and performance model."""


@main.command()
@model_option
@hw_option
@seed_option
@click.option("--batches", default=1, show_default=True, type=int,
              help="Random batches per matrix combination.")
@click.option("--tolerance", default=None, type=float,
              help="Override the per-dtype tolerances (0 forces failure).")
@click.option("--max-tokens", default=512, show_default=True, type=int)
def verify(model, hw, seed, batches, tolerance, max_tokens):
    """Randomized kernel-vs-oracle equivalence across the workload matrix."""
    m = _model_profile(model)
    _hw_profile(hw)  # validated for parity even though numerics ignore it
    results = run_matrix(
        m.h_q, m.d_k, seed=seed, batches=batches, tolerance=tolerance,
        max_tokens=max_tokens, max_context=max_tokens,
    )
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        click.echo(f"[{status}] {r.label} err={r.max_err:.3e} tol={r.tolerance:g}")
    click.echo(f"{len(results) - failed}/{len(results)} combinations passed")
    if failed:
        sys.exit(1)


@main.command()
@model_option
@hw_option
@click.option("--workload", type=click.Choice(SWEEP_WORKLOADS), default="decode",
              show_default=True)
@click.option("--ablate", type=click.Choice(ABLATION_NAMES), default=None,
              help="Report a single ablation column instead of all three.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write the report here (and a figure alongside).")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv",
              show_default=True)
@click.option("--n", default=128, show_default=True, type=int,
              help="Sequences per decode batch.")
def simulate(model, hw, workload, ablate, out, fmt, n):
    """Sweep the doubling length ladder and report one row per length."""
    m = _model_profile(model)
    machine = _hw_profile(hw)
    ablations = (ablate,) if ablate else ABLATION_NAMES
    report = sweep(m, machine, workload, ablations=ablations, n=n)
    if out is None:
        click.echo(report_csv(report) if fmt == "csv" else report_json(report), nl=False)
        return
    write_report(report, out, fmt)
    figure = render_figure(report, out.with_suffix(".png"))
    click.echo(f"wrote {out} and {figure}")


@main.command()
@model_option
@hw_option
@click.option("--workload", type=click.Choice(SWEEP_WORKLOADS), default="decode",
              show_default=True)
@click.option("--length", default=8192, show_default=True, type=int,
              help="Context length (decode) or sequence length (prefill).")
@click.option("--n", default=128, show_default=True, type=int)
def bench(model, hw, workload, length, n):
    """Simulate one workload point and print its latency and rates."""
    m = _model_profile(model)
    machine = _hw_profile(hw)
    report = sweep(m, machine, workload, lengths=[length], n=n)
    row = dict(zip(report.header, report.rows[0]))
    for col, value in row.items():
        display = f"{value:.4f}" if isinstance(value, float) else str(value)
        click.echo(f"{col}: {display}")


@main.command()
@model_option
@hw_option
@click.option("--case", "case_name", type=click.Choice(sorted(_CASES)), required=True)
@click.option("--length", required=True, type=int)
@seed_option
@click.option("--samples", default=32, show_default=True, type=int,
              help="Seeded batches for the mixed-case objective.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Merge the result into this JSON lookup table.")
def tune(model, hw, case_name, length, seed, samples, out):
    """Grid-search block sizes for one tuning key."""
    m = _model_profile(model)
    machine = _hw_profile(hw)
    case = _CASES[case_name]
    key = TuningKey(case, m.h_q, m.h_kv, m.d_k, m.dtype, machine.name, length)
    if case is WorkloadCase.DECODE_ONLY:
        # single-token rows pin b_q=c_q, so only the kv grid matters
        space = [BlockParams(128, b, 128, c)
                 for b in (128, 256, 512, 1024, 2048)
                 for c in (128, 256, 512, 1024) if c <= b]
    else:
        space = default_search_space()
    result = run_tune(key, space=space, hw=machine, seed=seed, samples=samples)
    click.echo(
        f"best {result.params.astuple()} "
        f"predicted_latency_us={result.predicted_latency * 1e6:.4f} "
        f"({len(result.search_log)} points)"
    )
    if out is not None:
        table = load_table(out) if out.is_file() else {}
        table[result.key] = (result.params, result.predicted_latency)
        save_table(out, table)
        click.echo(f"wrote {out} ({len(table)} entries)")


@main.command()
@model_option
@hw_option
@click.option("--case", "case_name", type=click.Choice(sorted(_CASES)), required=True)
@click.option("--length", required=True, type=int)
@click.option("--table", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Lookup table JSON; bundled pretuned by default.")
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text",
              show_default=True)
def lookup(model, hw, case_name, length, table, fmt):
    """Resolve block sizes for a key (exact, nearest bucket, or defaults)."""
    m = _model_profile(model)
    machine = _hw_profile(hw)
    key = TuningKey(_CASES[case_name], m.h_q, m.h_kv, m.d_k, m.dtype,
                    machine.name, length)
    params = lookup_params(_tuning_table(table), key)
    if fmt == "json":
        click.echo(f'{{"b_q": {params.b_q}, "b_kv": {params.b_kv}, '
                   f'"c_q": {params.c_q}, "c_kv": {params.c_kv}}}')
    else:
        click.echo(f"b_q={params.b_q} b_kv={params.b_kv} c_q={params.c_q} c_kv={params.c_kv}")


@main.command(name="verify-tables")
@click.option("--table", "tables", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              multiple=True, help="Check these CSVs instead of the bundled set.")
def verify_tables(tables):
    """Recheck the reference tables against the rate formulas, row by row."""
    try:
        if tables:
            reports = {p.name: check_tables(p) for p in tables}
        else:
            reports = check_bundled_tables()
    except (ParseError, FileNotFoundError) as exc:
        raise click.UsageError(str(exc))
    any_failed = False
    for name, report in reports.items():
        lengths = []
        for check in report.checks:
            if check.length not in lengths:
                lengths.append(check.length)
        for length in lengths:
            cells = [c for c in report.checks if c.length == length]
            ok = all(c.passed for c in cells)
            worst = max(c.residual for c in cells)
            any_failed |= not ok
            status = "PASS" if ok else "FAIL"
            click.echo(f"[{status}] {name} length={length} max_residual={worst:.5f}")
            for c in cells:
                if not c.passed:
                    click.echo(
                        f"       {c.column}: printed {c.printed} outside "
                        f"[{c.low:.4f}, {c.high:.4f}]"
                    )
    if any_failed:
        sys.exit(1)
