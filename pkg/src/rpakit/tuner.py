"""Offline grid search for block sizes, persisted as a lookup table.

Block sizes change scheduling and padding but never results, so they can
be tuned ahead of serving: replay each candidate through the trace
simulator, keep the fastest, and store it under a key describing the
workload class, model shape, and hardware. At serve time a lookup falls
back from exact key to nearest length bucket to safe defaults.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .batch import WorkloadCase
from .engine import DEFAULT_BLOCKS, BlockParams, trace_workload
from .errors import InvalidSearchSpace, ParseError
from .numerics import element_bits, packing_for_bits
from .simulator import HardwareProfile, load_profile, simulate, vmem_footprint
from .workloads import decode_batch, mixed_batch, prefill_batch

logger = logging.getLogger(__name__)

SEARCH_B = (128, 256, 512, 1024, 2048)
SEARCH_C = (128, 256, 512, 1024)

_PRETUNED_PATH = Path(__file__).parent / "tables" / "pretuned.json"


@dataclass(frozen=True)
class TuningKey:
    """Identity of one tuning problem: workload case and length bucket plus
    the model shape and hardware the timings depend on."""

    case: WorkloadCase
    h_q: int
    h_kv: int
    d_k: int
    dtype: str
    hw: str
    length: int  # context bucket for decode/mixed, sequence bucket for prefill

    def __post_init__(self):
        if not isinstance(self.case, WorkloadCase):
            raise ValueError(f"case must be a WorkloadCase, got {self.case!r}")
        if any(x <= 0 for x in (self.h_q, self.h_kv, self.d_k, self.length)):
            raise ValueError(f"key dimensions must be positive: {self}")

    def to_json(self) -> dict:
        return {
            "case": self.case.name,
            "h_q": self.h_q,
            "h_kv": self.h_kv,
            "d_k": self.d_k,
            "dtype": self.dtype,
            "hw": self.hw,
            "length": self.length,
        }

    def canonical(self) -> str:
        """Serialized form independent of field ordering, fit for dict keys."""
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(data: dict) -> "TuningKey":
        try:
            return TuningKey(
                case=WorkloadCase[data["case"]],
                h_q=int(data["h_q"]),
                h_kv=int(data["h_kv"]),
                d_k=int(data["d_k"]),
                dtype=str(data["dtype"]),
                hw=str(data["hw"]),
                length=int(data["length"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad tuning key {data!r}: {exc}") from exc


@dataclass(frozen=True)
class SearchPoint:
    params: BlockParams
    latency: float
    vmem_bytes: int


@dataclass(frozen=True)
class TuningResult:
    key: TuningKey
    params: BlockParams
    predicted_latency: float
    search_log: tuple[SearchPoint, ...]


def default_search_space() -> list[BlockParams]:
    """Power-of-two grid over (b_q, b_kv, c_q, c_kv) with c dividing b."""
    points = []
    for b_q in SEARCH_B:
        for b_kv in SEARCH_B:
            for c_q in SEARCH_C:
                for c_kv in SEARCH_C:
                    if c_q <= b_q and c_kv <= b_kv:
                        points.append(BlockParams(b_q, b_kv, c_q, c_kv))
    return points


def default_workloads(key: TuningKey, seed: int = 0, samples: int = 32) -> list:
    """Representative batches for a key: decode and prefill are fully
    determined by the length bucket; mixed draws a seeded sample since one
    (s, n) shape covers many raggedness patterns."""
    if key.case is WorkloadCase.DECODE_ONLY:
        return [decode_batch(128, key.length)]
    if key.case is WorkloadCase.PREFILL_ONLY:
        return [prefill_batch(key.length)]
    rng = np.random.default_rng(seed)
    return [
        mixed_batch(rng, 16, max_context=max(key.length, 4))
        for _ in range(samples)
    ]


def _config(key: TuningKey) -> AttentionConfig:
    pack = packing_for_bits(element_bits(key.dtype))
    return AttentionConfig(
        h_q=key.h_q, h_kv=key.h_kv, d_k=key.d_k, causal=True, p_q=pack, p_kv=pack
    )


def _rank(point: SearchPoint):
    p = point.params
    return (point.latency, point.vmem_bytes, p.b_kv, p.b_q, p.c_kv, p.c_q)


def tune(key, workload=None, space=None, *, hw=None, seed=0, samples=32) -> TuningResult:
    """Exhaustively evaluate the search space and return the fastest point.

    workload may be None (seeded defaults for the key), a callable
    (key, seed) -> batches, or an iterable of batches. Ties break toward
    the smaller VMEM footprint, then the smaller block sizes, so results
    are deterministic regardless of grid order.
    """
    if hw is None:
        hw = load_profile(key.hw)
    if workload is None:
        batches = default_workloads(key, seed, samples)
    elif callable(workload):
        batches = list(workload(key, seed))
    else:
        batches = list(workload)
    if not batches:
        raise InvalidSearchSpace("no batches to evaluate against")

    points = list(space) if space is not None else default_search_space()
    if not points:
        raise InvalidSearchSpace("empty block-size search space")
    for p in points:
        if not isinstance(p, BlockParams):
            raise InvalidSearchSpace(f"search space entries must be BlockParams, got {p!r}")

    config = _config(key)
    log = []
    for params in points:
        total = 0.0
        footprint = 0
        for batch in batches:
            trace = trace_workload(batch, config, params, dtype=key.dtype)
            report = simulate(trace, hw, keep_timeline=False)
            total += report.total_latency
            footprint = max(footprint, vmem_footprint(trace))
        log.append(SearchPoint(params, total / len(batches), footprint))

    best = min(log, key=_rank)
    return TuningResult(
        key=key, params=best.params, predicted_latency=best.latency, search_log=tuple(log)
    )


def _same_family(a: TuningKey, b: TuningKey) -> bool:
    return (
        a.case is b.case
        and (a.h_q, a.h_kv, a.d_k, a.dtype, a.hw) == (b.h_q, b.h_kv, b.d_k, b.dtype, b.hw)
    )


def lookup(table: dict, key: TuningKey) -> BlockParams:
    """Exact hit, else the nearest length bucket in the same family, else
    the library defaults. Never fails; misses are logged."""
    hit = table.get(key)
    if hit is not None:
        return hit[0]
    siblings = [k for k in table if _same_family(k, key)]
    if siblings:
        nearest = min(siblings, key=lambda k: (abs(k.length - key.length), k.length))
        logger.info(
            "no tuned entry for length %d; using %d bucket", key.length, nearest.length
        )
        return table[nearest][0]
    logger.info("no tuned entry for %s; using defaults %s", key.canonical(), DEFAULT_BLOCKS)
    return DEFAULT_BLOCKS


def save_table(path, results) -> None:
    """Persist tuning results as a JSON list of key/params/latency records.

    Accepts TuningResult iterables or an already-loaded {key: (params,
    latency)} table, so merged tables round-trip unchanged.
    """
    if isinstance(results, dict):
        items = [(k, p, lat) for k, (p, lat) in results.items()]
    else:
        items = [(r.key, r.params, r.predicted_latency) for r in results]
    items.sort(key=lambda it: it[0].canonical())
    rows = [
        {
            "key": key.to_json(),
            "params": list(params.astuple()),
            "predicted_latency": latency,
        }
        for key, params, latency in items
    ]
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def load_table(path) -> dict:
    """Read a persisted lookup table into {TuningKey: (BlockParams, latency)}."""
    try:
        rows = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read tuning table {path}: {exc}") from exc
    if not isinstance(rows, list):
        raise ParseError(f"tuning table {path} must be a JSON list")
    table = {}
    for row in rows:
        try:
            key = TuningKey.from_json(row["key"])
            params = BlockParams(*row["params"])
            latency = float(row["predicted_latency"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad tuning table row {row!r}: {exc}") from exc
        table[key] = (params, latency)
    return table


def pretuned_table() -> dict:
    """The lookup table shipped with the package (tpu7x, llama3-8b shapes)."""
    return load_table(_PRETUNED_PATH)
