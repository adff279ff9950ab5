"""Sweep reports: model profiles, length ladders, delimited output, figures.

The simulate path produces one row per ladder length with the simulated
latency, its rate (throughput for decode, speed for prefill), the matching
utilization percentage, and the ablated latencies. Writers emit CSV or
JSON with fixed formatting so a seeded run is byte-reproducible, and the
figure renderer draws the rate/utilization curves next to the data file.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files; no display server
import matplotlib.pyplot as plt

from .attention import AttentionConfig
from .batch import WorkloadCase
from .engine import trace_workload
from .errors import ParseError
from .numerics import element_bits, element_bytes, packing_for_bits
from .perfmodel import (
    DecodeWorkload,
    PrefillWorkload,
    decode_throughput,
    mbu,
    mfu,
    prefill_speed,
)
from .simulator import AblationFlags, HardwareProfile, _profile_dirs, load_profile, simulate
from .tuner import TuningKey, lookup, pretuned_table
from .workloads import decode_batch, prefill_batch, sweep_lengths

ABLATION_NAMES = ("kv-update", "fa", "dma")
_ABLATION_COLUMN = {
    "kv-update": "no_kv_update_us",
    "fa": "no_fa_us",
    "dma": "no_dma_us",
}
SWEEP_WORKLOADS = ("decode", "prefill", "prefill-noncausal")

_MODEL_FIELDS = {"name", "h_q", "h_kv", "d_k", "dtype"}


@dataclass(frozen=True)
class ModelProfile:
    name: str
    h_q: int
    h_kv: int
    d_k: int
    dtype: str

    def __post_init__(self):
        if any(x <= 0 for x in (self.h_q, self.h_kv, self.d_k)):
            raise ValueError(f"model head counts must be positive: {self}")
        if self.h_q % self.h_kv:
            raise ValueError(f"h_q must be a multiple of h_kv: {self}")
        element_bits(self.dtype)  # rejects unknown dtypes


def load_model_profile(spec: str | Path) -> ModelProfile:
    """Load a model profile by bundled name or explicit JSON path."""
    path = Path(spec)
    if not path.is_file():
        for directory in _profile_dirs():
            candidate = directory / f"{spec}.json"
            if candidate.is_file():
                path = candidate
                break
        else:
            raise FileNotFoundError(f"no model profile {spec!r}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad model profile {path}: {exc}") from exc
    if not isinstance(data, dict) or set(data) != _MODEL_FIELDS:
        raise ParseError(f"model profile {path} must have fields {sorted(_MODEL_FIELDS)}")
    return ModelProfile(**data)


@dataclass(frozen=True)
class SweepReport:
    workload: str
    model: str
    hw: str
    header: tuple[str, ...]
    rows: tuple[tuple, ...]

    def column(self, name: str) -> list:
        idx = self.header.index(name)
        return [row[idx] for row in self.rows]


def _attention_config(model: ModelProfile, causal: bool) -> AttentionConfig:
    pack = packing_for_bits(element_bits(model.dtype))
    return AttentionConfig(
        h_q=model.h_q, h_kv=model.h_kv, d_k=model.d_k,
        causal=causal, p_q=pack, p_kv=pack,
    )


def sweep(
    model: ModelProfile,
    hw: HardwareProfile,
    workload: str,
    *,
    ablations=ABLATION_NAMES,
    table: dict | None = None,
    lengths=None,
    n: int = 128,
) -> SweepReport:
    """Simulate the doubling length ladder for one workload kind.

    Block sizes come from the lookup table (bundled pretuned entries by
    default), so rows reflect the shipped serving configuration.
    """
    if workload not in SWEEP_WORKLOADS:
        raise ValueError(f"unknown workload {workload!r}, expected {SWEEP_WORKLOADS}")
    if table is None:
        table = pretuned_table()
    lengths = list(lengths) if lengths is not None else sweep_lengths()
    decode = workload == "decode"
    causal = workload != "prefill-noncausal"
    config = _attention_config(model, causal)
    case = WorkloadCase.DECODE_ONLY if decode else WorkloadCase.PREFILL_ONLY

    length_col = "context_length" if decode else "s"
    rate_col = "throughput_gibs" if decode else "speed_tflops"
    util_col = "mbu_pct" if decode else "mfu_pct"
    header = [length_col, "latency_us", rate_col, util_col]
    header += [_ABLATION_COLUMN[a] for a in ablations]

    rows = []
    for length in lengths:
        key = TuningKey(case, model.h_q, model.h_kv, model.d_k,
                        model.dtype, hw.name, length)
        blocks = lookup(table, key)
        batch = decode_batch(n, length) if decode else prefill_batch(length)
        trace = trace_workload(batch, config, blocks, dtype=model.dtype)
        latency = simulate(trace, hw, keep_timeline=False).total_latency
        if decode:
            rate = decode_throughput(DecodeWorkload(
                n=n, context_length=length, h_q=model.h_q, h_kv=model.h_kv,
                d_k=model.d_k, data_bytes=element_bytes(model.dtype),
                latency=latency,
            ))
            util = mbu(rate, hw)
        else:
            rate = prefill_speed(PrefillWorkload(
                s=length, h_q=model.h_q, d_k=model.d_k, causal=causal,
                latency=latency, c_kv=blocks.c_kv,
            ))
            util = mfu(rate, hw, model.d_k)
        row = [length, latency * 1e6, rate, util]
        for name in ablations:
            ablated = simulate(trace, hw, AblationFlags.from_name(name),
                               keep_timeline=False)
            row.append(ablated.total_latency * 1e6)
        rows.append(tuple(row))
    return SweepReport(
        workload=workload, model=model.name, hw=hw.name,
        header=tuple(header), rows=tuple(rows),
    )


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def report_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    buf.write(",".join(report.header) + "\n")
    for row in report.rows:
        buf.write(",".join(_format_cell(v) for v in row) + "\n")
    return buf.getvalue()


def report_json(report: SweepReport) -> str:
    payload = {
        "workload": report.workload,
        "model": report.model,
        "hw": report.hw,
        "rows": [
            {col: row[i] for i, col in enumerate(report.header)}
            for row in report.rows
        ],
    }
    return json.dumps(payload, indent=2) + "\n"


def write_report(report: SweepReport, out: Path | str, fmt: str = "csv") -> Path:
    out = Path(out)
    if fmt == "csv":
        out.write_text(report_csv(report))
    elif fmt == "json":
        out.write_text(report_json(report))
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return out


def render_figure(report: SweepReport, out: Path | str) -> Path:
    """Draw rate and utilization against length next to the data file."""
    out = Path(out)
    lengths = report.column(report.header[0])
    rate_col, util_col = report.header[2], report.header[3]
    fig, (ax_rate, ax_util) = plt.subplots(1, 2, figsize=(9, 3.4))
    for ax, col, label in ((ax_rate, rate_col, "GiB/s" if "gibs" in rate_col else "TFLOPs/s"),
                           (ax_util, util_col, "% of peak")):
        ax.plot(lengths, report.column(col), marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel(report.header[0])
        ax.set_ylabel(label)
        ax.set_title(col)
        ax.grid(True, alpha=0.3)
    fig.suptitle(f"{report.workload}: {report.model} on {report.hw}")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
