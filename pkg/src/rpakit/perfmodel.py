"""Closed-form rate accounting: latency in, throughput/speed/utilization out.

Decode steps are memory-bound, so their figure of merit is effective HBM
traffic over time (GiB/s) and the fraction of peak bandwidth that
represents. Prefill is compute-bound, so its figure of merit is attention
FLOPs over time (TFLOPs/s) and the fraction of the derated matrix-unit
peak. The same formulas power the consistency checker for the reference
measurement tables bundled under ``tables/``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import MissingParameter, ParseError
from .simulator import HardwareProfile, load_profile, mxu_utilization

GIB = 1024**3
TERA = 10**12

# printed rates drift from exact formula values only through the
# microsecond rounding of the latency columns; 0.5% absorbs that
RESIDUAL_TOLERANCE = 0.005


@dataclass(frozen=True)
class DecodeWorkload:
    """One batched decode step: n sequences each appending a single token.

    context_length counts tokens per sequence including the new one;
    latency is in seconds.
    """

    n: int
    context_length: int
    h_q: int
    h_kv: int
    d_k: int
    data_bytes: int
    latency: float

    def __post_init__(self):
        dims = (self.n, self.h_q, self.h_kv, self.d_k, self.data_bytes)
        if any(x <= 0 for x in dims):
            raise ValueError(f"workload dimensions must be positive: {self}")
        if self.context_length < 0:
            raise ValueError("context_length must be non-negative")
        if self.latency <= 0:
            raise ValueError("latency must be positive")


@dataclass(frozen=True)
class PrefillWorkload:
    """One prefill pass over a sequence of s tokens; latency in seconds.

    c_kv (the KV compute-block width) only matters under causal masking,
    where it sets how much already-attended context each block re-reads;
    non-causal workloads may leave it unset.
    """

    s: int
    h_q: int
    d_k: int
    causal: bool
    latency: float
    c_kv: int | None = None

    def __post_init__(self):
        if any(x <= 0 for x in (self.s, self.h_q, self.d_k)):
            raise ValueError(f"workload dimensions must be positive: {self}")
        if self.latency <= 0:
            raise ValueError("latency must be positive")
        if self.c_kv is not None and self.c_kv <= 0:
            raise ValueError("c_kv must be positive when given")


def decode_bytes_moved(
    n: int, context_length: int, h_q: int, h_kv: int, d_k: int, data_bytes: int
) -> int:
    """HBM bytes for one decode step: context_length merged KV rows fetched
    plus one written back per sequence, and the Q/O vectors."""
    rows = (context_length + 1) * 2 * h_kv + 2 * h_q
    return n * d_k * rows * data_bytes


def decode_throughput(w: DecodeWorkload) -> float:
    """Effective memory throughput of a decode step in GiB/s."""
    moved = decode_bytes_moved(
        w.n, w.context_length, w.h_q, w.h_kv, w.d_k, w.data_bytes
    )
    return moved / (GIB * w.latency)


def mbu(throughput: float, hw: HardwareProfile) -> float:
    """Memory bandwidth utilization in percent of the profile's HBM peak."""
    if hw.hbm_bandwidth <= 0:
        raise ValueError("peak bandwidth must be positive")
    return throughput / (hw.hbm_bandwidth / GIB) * 100.0


def prefill_flops(
    s: int, h_q: int, d_k: int, causal: bool, c_kv: int | None = None
) -> int:
    """Attention FLOPs for a prefill pass.

    Non-causal: every query scores every key, 4*s^2*h_q*d_k.
    Causal: block-skipping halves the score grid but each KV compute block
    re-attends up to c_kv past tokens, 2*s*(s + min(c_kv, s))*h_q*d_k; the
    clamp covers sequences shorter than one compute block.
    """
    if not causal:
        return 4 * s * s * h_q * d_k
    if c_kv is None:
        raise MissingParameter("causal prefill FLOPs require c_kv")
    return 2 * s * (s + min(c_kv, s)) * h_q * d_k


def prefill_speed(w: PrefillWorkload) -> float:
    """Arithmetic speed of a prefill pass in TFLOPs/s."""
    return prefill_flops(w.s, w.h_q, w.d_k, w.causal, w.c_kv) / (TERA * w.latency)


def mfu(speed: float, hw: HardwareProfile, d_k: int) -> float:
    """Flops utilization in percent of the matrix-unit peak achievable at
    this head width (a head narrower than the systolic array derates it)."""
    if hw.peak_flops <= 0:
        raise ValueError("peak flops must be positive")
    effective = hw.peak_flops / TERA * mxu_utilization(d_k, mxu_dim=hw.mxu_dim)
    return speed / effective * 100.0


# ---------------------------------------------------------------------------
# bundled-table consistency checking

_TABLE_DIR = Path(__file__).parent / "tables"

_DECODE_HEADER = [
    "context_length",
    "latency_incl_us",
    "latency_excl_us",
    "throughput_incl",
    "throughput_excl",
    "mbu_incl",
    "mbu_excl",
]
_PREFILL_HEADER = [
    "s",
    "latency_incl_us",
    "latency_excl_us",
    "speed_incl",
    "speed_excl",
    "mfu_incl",
    "mfu_excl",
]
_ABLATION_COLUMNS = ["no_kv_update_us", "no_fa_us", "no_dma_us"]


@dataclass(frozen=True)
class CellCheck:
    """Verdict for one printed value: residual 0 when it falls inside the
    interval implied by the microsecond-rounded latency, else the relative
    distance to the nearest interval edge."""

    length: int
    column: str
    printed: float
    low: float
    high: float
    residual: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "length": self.length,
            "column": self.column,
            "printed": self.printed,
            "low": self.low,
            "high": self.high,
            "residual": self.residual,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class TableReport:
    path: str
    kind: str
    checks: tuple[CellCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CellCheck]:
        return [c for c in self.checks if not c.passed]

    def max_residual(self) -> float:
        return max((c.residual for c in self.checks), default=0.0)

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "kind": self.kind,
            "passed": self.passed,
            "max_residual": self.max_residual(),
            "checks": [c.to_json() for c in self.checks],
        }


def bundled_table_dir() -> Path:
    return _TABLE_DIR


def load_manifest(directory: Path | str | None = None) -> dict:
    """Read the table manifest mapping CSV file names to workload metadata."""
    directory = Path(directory) if directory is not None else _TABLE_DIR
    path = directory / "manifest.json"
    if not path.is_file():
        raise ParseError(f"no table manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad table manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ParseError(f"table manifest {path} must be a JSON object")
    return manifest


def _interval_residual(printed: float, low: float, high: float) -> float:
    if low <= printed <= high:
        return 0.0
    edge = low if printed < low else high
    return abs(printed - edge) / abs(edge)


def _parse_rows(path: Path, header: list[str]) -> list[dict]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read table {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames != header:
        raise ParseError(
            f"{path.name}: expected columns {header}, got {reader.fieldnames}"
        )
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        if any(v is None for v in raw.values()) or None in raw:
            raise ParseError(f"{path.name} line {lineno}: ragged row")
        try:
            rows.append({k: float(v) for k, v in raw.items()})
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path.name} line {lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path.name}: no data rows")
    return rows


def _rate_cells(length, column, printed, rate_lo, rate_hi, tolerance, checks):
    residual = _interval_residual(printed, rate_lo, rate_hi)
    checks.append(
        CellCheck(
            length=length,
            column=column,
            printed=printed,
            low=rate_lo,
            high=rate_hi,
            residual=residual,
            passed=residual <= tolerance,
        )
    )


def _util_cells(length, column, printed, util_lo, util_hi, tolerance, checks):
    residual = _interval_residual(printed, util_lo, util_hi)
    # utilization is a fraction of peak: anything outside (0, 100] is
    # wrong no matter how small the residual
    in_range = 0.0 < printed <= 100.0
    checks.append(
        CellCheck(
            length=length,
            column=column,
            printed=printed,
            low=util_lo,
            high=util_hi,
            residual=residual,
            passed=in_range and residual <= tolerance,
        )
    )


def _check_decode(path, meta, hw, tolerance) -> list[CellCheck]:
    checks: list[CellCheck] = []
    for row in _parse_rows(path, _DECODE_HEADER):
        ctx = int(row["context_length"])
        for tag in ("incl", "excl"):
            t_us = row[f"latency_{tag}_us"]
            # a printed whole-microsecond latency stands for [t-0.5, t+0.5)
            rates = [
                decode_throughput(
                    DecodeWorkload(
                        n=meta["n"],
                        context_length=ctx,
                        h_q=meta["h_q"],
                        h_kv=meta["h_kv"],
                        d_k=meta["d_k"],
                        data_bytes=meta["data_bytes"],
                        latency=t * 1e-6,
                    )
                )
                for t in (t_us + 0.5, t_us - 0.5)
            ]
            _rate_cells(
                ctx, f"throughput_{tag}", row[f"throughput_{tag}"],
                rates[0], rates[1], tolerance, checks,
            )
            _util_cells(
                ctx, f"mbu_{tag}", row[f"mbu_{tag}"],
                mbu(rates[0], hw), mbu(rates[1], hw), tolerance, checks,
            )
    return checks


def _check_prefill(path, meta, hw, tolerance) -> list[CellCheck]:
    checks: list[CellCheck] = []
    for row in _parse_rows(path, _PREFILL_HEADER):
        s = int(row["s"])
        for tag in ("incl", "excl"):
            t_us = row[f"latency_{tag}_us"]
            rates = [
                prefill_speed(
                    PrefillWorkload(
                        s=s,
                        h_q=meta["h_q"],
                        d_k=meta["d_k"],
                        causal=bool(meta["causal"]),
                        latency=t * 1e-6,
                        c_kv=meta.get("c_kv"),
                    )
                )
                for t in (t_us + 0.5, t_us - 0.5)
            ]
            _rate_cells(
                s, f"speed_{tag}", row[f"speed_{tag}"],
                rates[0], rates[1], tolerance, checks,
            )
            _util_cells(
                s, f"mfu_{tag}", row[f"mfu_{tag}"],
                mfu(rates[0], hw, meta["d_k"]),
                mfu(rates[1], hw, meta["d_k"]),
                tolerance, checks,
            )
    return checks


def _check_ablation(path, header) -> list[CellCheck]:
    """Ablated runs do strictly less work, so each ablated latency must not
    exceed the full kernel-only latency; rates are not recomputed here."""
    checks: list[CellCheck] = []
    for row in _parse_rows(path, header):
        length = int(row[header[0]])
        incl, excl = row["latency_incl_us"], row["latency_excl_us"]
        checks.append(
            CellCheck(
                length=length,
                column="latency_excl_us<=latency_incl_us",
                printed=excl,
                low=0.0,
                high=incl,
                residual=_interval_residual(excl, 0.0, incl),
                passed=0 < excl <= incl,
            )
        )
        for col in _ABLATION_COLUMNS:
            val = row[col]
            checks.append(
                CellCheck(
                    length=length,
                    column=f"{col}<=latency_excl_us",
                    printed=val,
                    low=0.0,
                    high=excl,
                    residual=_interval_residual(val, 0.0, excl),
                    passed=0 < val <= excl,
                )
            )
    return checks


def check_tables(
    table_csv: Path | str,
    manifest: dict | None = None,
    hw: HardwareProfile | None = None,
    tolerance: float = RESIDUAL_TOLERANCE,
) -> TableReport:
    """Recompute the rate and utilization columns of one reference table
    from its latency columns and report per-cell residuals.

    The manifest (defaulting to manifest.json beside the CSV) supplies the
    workload shape behind each file; ablation tables only support ordering
    checks since their rate columns are not printed.
    """
    path = Path(table_csv)
    if manifest is None:
        manifest = load_manifest(path.parent)
    meta = manifest.get(path.name)
    if meta is None:
        raise ParseError(f"{path.name} has no manifest entry")
    kind = meta.get("kind")
    if hw is None:
        hw = load_profile(meta.get("hw", "tpu7x"))

    if kind == "decode":
        checks = _check_decode(path, meta, hw, tolerance)
    elif kind == "prefill":
        checks = _check_prefill(path, meta, hw, tolerance)
    elif kind == "ablation_decode":
        checks = _check_ablation(path, ["context_length"] + _DECODE_HEADER[1:3] + _ABLATION_COLUMNS)
    elif kind == "ablation_prefill":
        checks = _check_ablation(path, ["s"] + _PREFILL_HEADER[1:3] + _ABLATION_COLUMNS)
    else:
        raise ParseError(f"{path.name}: unknown table kind {kind!r}")
    return TableReport(path=str(path), kind=kind, checks=tuple(checks))


def check_bundled_tables(
    hw: HardwareProfile | None = None,
    tolerance: float = RESIDUAL_TOLERANCE,
) -> dict[str, TableReport]:
    """Run check_tables over every bundled reference CSV, keyed by name."""
    manifest = load_manifest()
    return {
        name: check_tables(_TABLE_DIR / name, manifest, hw, tolerance)
        for name in sorted(manifest)
    }
