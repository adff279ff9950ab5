"""Discrete-event replay of kernel traces against a parametric machine.

One compute resource plus a small set of DMA channels (fetch-class and
writeback-class by default) replay the trace in issue order: transfers start
as soon as their channel and dependencies allow, compute waits for the
fetches it consumes, and the double-buffered overlap emerges from the
prefetch positions already encoded in the trace.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import MalformedTrace, ParseError
from .trace import EventTrace


@dataclass(frozen=True)
class HardwareProfile:
    hbm_bandwidth: float  # bytes/s
    peak_flops: float  # FLOP/s, 16-bit
    mxu_dim: int = 256
    dma_base_latency: float = 1e-6  # seconds per transfer; free parameter
    vmem_bytes: int = 64 * 2**20
    num_dma_channels: int = 2
    bank_conflict_penalty: float = 2.0
    name: str = "custom"

    def __post_init__(self):
        numeric = (
            self.hbm_bandwidth,
            self.peak_flops,
            self.mxu_dim,
            self.vmem_bytes,
            self.num_dma_channels,
            self.bank_conflict_penalty,
        )
        # base latency may be exactly zero to model ideal overlap
        if any(x <= 0 for x in numeric) or self.dma_base_latency < 0:
            raise ValueError(f"profile fields must be positive: {self}")


@dataclass(frozen=True)
class AblationFlags:
    disable_kv_update: bool = False
    disable_flash_attention: bool = False
    disable_dma: bool = False

    @staticmethod
    def from_name(name: str | None) -> "AblationFlags":
        table = {
            None: AblationFlags(),
            "kv-update": AblationFlags(disable_kv_update=True),
            "fa": AblationFlags(disable_flash_attention=True),
            "dma": AblationFlags(disable_dma=True),
        }
        if name not in table:
            raise ParseError(f"unknown ablation {name!r}; expected kv-update, fa, or dma")
        return table[name]


@dataclass
class TimelineEntry:
    kind: str
    seq: int
    block: tuple
    start: float
    end: float
    channel: int | None  # None for compute


@dataclass
class SimReport:
    total_latency: float
    dma_busy: float
    compute_busy: float
    bytes_moved: int
    flops_executed: int
    mbu: float  # fraction of peak bandwidth
    mfu: float  # fraction of peak compute
    timeline: list = field(default_factory=list)
    vmem_exceeded: bool = False

    def to_json(self, include_timeline=False) -> dict:
        out = asdict(self)
        if not include_timeline:
            out.pop("timeline")
        else:
            out["timeline"] = [asdict(t) for t in self.timeline]
        return out


def mxu_utilization(d_k: int, rows: int | None = None, cols: int | None = None,
                    mxu_dim: int = 256) -> float:
    """Fraction of the systolic array the attention matmuls can occupy.

    d_k limits one stationary dimension of both matmuls (contracting in
    Q K^T, non-contracting in P V); the KV tile width limits the other.
    Rows stream through the array and never cap utilization.
    """
    if d_k <= 0 or mxu_dim <= 0:
        raise ValueError("dimensions must be positive")
    util = min(1.0, d_k / mxu_dim)
    if cols is not None:
        util *= min(1.0, cols / mxu_dim)
    return util


_FETCH_KINDS = ("fetch_q", "fetch_kv")


def simulate(trace: EventTrace, hw: HardwareProfile, flags: AblationFlags | None = None,
             keep_timeline: bool = True) -> SimReport:
    """Replay a trace and report latency, busy times, and utilization.

    Transfer duration is dma_base_latency + bytes/bandwidth on the least
    loaded channel of its class; compute duration is flops over effective
    peak, doubled when the emitted KV load stride is even (bank conflicts).
    Ablation flags zero out their event class and drop its bytes/flops from
    the totals. Raises MalformedTrace when an event depends on a fetch that
    has not been issued.
    """
    flags = flags or AblationFlags()
    n_ch = hw.num_dma_channels
    if n_ch == 1:
        fetch_set = wb_set = (0,)
    else:
        fetch_set, wb_set = tuple(range(n_ch - 1)), (n_ch - 1,)
    channel_free = [0.0] * n_ch
    t_core = 0.0
    end_at: dict = {}
    timeline = []
    bytes_moved = 0
    flops_executed = 0
    dma_busy = compute_busy = 0.0
    buf_peak = {"fetch_q": 0, "fetch_kv": 0, "send_o": 0}

    def dep_end(kind, seq, block):
        try:
            return end_at[(kind, seq, block)]
        except KeyError:
            raise MalformedTrace(f"{kind} {seq}/{block} needed before it was issued") from None

    for e in trace:
        if e.kind == "compute":
            if flags.disable_flash_attention:
                dur = 0.0
            else:
                util = mxu_utilization(e.d_k, e.rows, e.cols, hw.mxu_dim)
                dur = e.flops / (hw.peak_flops * util)
                if e.bank_stride % 2 == 0:
                    dur *= hw.bank_conflict_penalty
                flops_executed += e.flops
            start = max(
                t_core,
                dep_end("fetch_q", e.seq, e.block[:1]),
                dep_end("fetch_kv", e.seq, e.block),
            )
            end = start + dur
            t_core = end
            compute_busy += dur
            channel = None
        else:
            disabled = flags.disable_dma or (
                e.kind == "update_kv" and flags.disable_kv_update
            )
            if e.kind in buf_peak:
                buf_peak[e.kind] = max(buf_peak[e.kind], e.bytes)
            dur = 0.0 if disabled else hw.dma_base_latency + e.bytes / hw.hbm_bandwidth
            after = dep_end("fetch_kv", e.seq, e.block) if e.kind == "update_kv" else 0.0
            chans = fetch_set if e.kind in _FETCH_KINDS else wb_set
            channel = min(chans, key=lambda c: channel_free[c])
            start = max(t_core, channel_free[channel], after)
            end = start + dur
            channel_free[channel] = end
            dma_busy += dur
            if not disabled:
                bytes_moved += e.bytes
        end_at[e.key] = end
        if keep_timeline:
            timeline.append(TimelineEntry(e.kind, e.seq, e.block, start, end, channel))

    total = max((t for t in end_at.values()), default=0.0)
    vmem_need = 2 * sum(buf_peak.values())  # double-buffered q, kv, o
    exceeded = vmem_need > hw.vmem_bytes
    if exceeded:
        warnings.warn(
            f"double-buffered working set {vmem_need} B exceeds VMEM "
            f"{hw.vmem_bytes} B; real hardware could not run this blocking",
            RuntimeWarning,
            stacklevel=2,
        )
    return SimReport(
        total_latency=total,
        dma_busy=dma_busy,
        compute_busy=compute_busy,
        bytes_moved=bytes_moved,
        flops_executed=flops_executed,
        mbu=bytes_moved / total / hw.hbm_bandwidth if total > 0 else 0.0,
        mfu=flops_executed / total / hw.peak_flops if total > 0 else 0.0,
        timeline=timeline,
        vmem_exceeded=exceeded,
    )


def vmem_footprint(trace: EventTrace) -> int:
    """Double-buffered VMEM bytes a trace's largest blocks would occupy."""
    peak = {"fetch_q": 0, "fetch_kv": 0, "send_o": 0}
    for e in trace:
        if e.kind in peak:
            peak[e.kind] = max(peak[e.kind], e.bytes)
    return 2 * sum(peak.values())


# profile files


def _profile_dirs():
    dirs = []
    env = os.environ.get("RPA_PROFILE_DIR")
    if env:
        dirs.append(Path(env))
    dirs.append(Path(__file__).parent / "profiles")
    return dirs


def load_profile(spec: str) -> HardwareProfile:
    """Load a hardware profile by file path or bundled/installed name."""
    path = Path(spec)
    if not path.suffix == ".json" or not path.exists():
        for d in _profile_dirs():
            cand = d / f"{spec}.json"
            if cand.exists():
                path = cand
                break
        else:
            raise FileNotFoundError(f"no hardware profile named {spec!r}")
    try:
        data = json.loads(path.read_text())
        return HardwareProfile(**data)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"bad hardware profile {path}: {exc}") from exc
