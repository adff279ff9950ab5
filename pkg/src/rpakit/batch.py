"""Ragged mixed-batch metadata: segmentation scan, dispatch, reordering,
and static (max tokens, max sequences) bounds."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BoundsExceeded, InvalidShape

DEFAULT_CHUNK_SIZE = 256


class WorkloadCase(enum.Enum):
    DECODE_ONLY = "decode"
    PREFILL_ONLY = "prefill"
    MIXED = "mixed"


class Bounds(NamedTuple):
    """Static upper bounds fixed at bring-up: exceeding either would force a
    recompilation in a real deployment, so it is an error here."""

    s: int  # max total new tokens per batch
    n: int  # max sequences per batch


@dataclass(frozen=True)
class RaggedBatch:
    q_lens: np.ndarray  # new tokens per sequence
    kv_lens: np.ndarray  # total context per sequence (cached + new)
    cu_q_lens: np.ndarray  # exclusive prefix sums, len num_seqs + 1
    bounds: Bounds
    chunk_size: int
    segmentation: tuple  # (i, j, k)

    @property
    def num_seqs(self) -> int:
        return len(self.q_lens)

    @property
    def total_tokens(self) -> int:
        return int(self.cu_q_lens[-1])

    def token_range(self, seq: int) -> tuple:
        return int(self.cu_q_lens[seq]), int(self.cu_q_lens[seq + 1])

    def segments(self):
        """The three dispatch ranges with their cases, empty ones skipped."""
        i, j, k = self.segmentation
        out = []
        for lo, hi, case in (
            (0, i, WorkloadCase.DECODE_ONLY),
            (i, j, WorkloadCase.PREFILL_ONLY),
            (j, k, WorkloadCase.MIXED),
        ):
            if hi > lo:
                out.append(((lo, hi), case))
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "q_lens": self.q_lens.tolist(),
                "kv_lens": self.kv_lens.tolist(),
                "bounds": list(self.bounds),
                "chunk_size": self.chunk_size,
            }
        )


def _segmentation_scan(q_lens, chunk_size):
    n = len(q_lens)
    i = 0
    while i < n and q_lens[i] == 1:
        i += 1
    j = i
    while j < n and q_lens[j] == chunk_size:
        j += 1
    return i, j, n


def build(q_lens, kv_lens, bounds: Bounds, chunk_size: int = DEFAULT_CHUNK_SIZE) -> RaggedBatch:
    """Assemble batch metadata and derive the segmentation indices.

    The scan takes the leading run of single-token sequences as the decode
    segment, the following run of exactly chunk_size-token sequences as the
    fixed-chunk prefill segment, and everything else as mixed.
    """
    q = np.asarray(q_lens, dtype=np.int64)
    kv = np.asarray(kv_lens, dtype=np.int64)
    if q.shape != kv.shape or q.ndim != 1:
        raise InvalidShape(f"q_lens {q.shape} and kv_lens {kv.shape} must be equal 1-D")
    if np.any(q < 0) or np.any(kv < 0):
        raise InvalidShape("lengths must be nonnegative")
    if np.any(kv < q):
        raise InvalidShape("context length must include the new tokens (kv_len >= q_len)")
    bounds = Bounds(*bounds)
    if len(q) > bounds.n:
        raise BoundsExceeded(f"{len(q)} sequences exceed the bound n={bounds.n}")
    total = int(q.sum())
    if total > bounds.s:
        raise BoundsExceeded(f"{total} tokens exceed the bound s={bounds.s}")
    cu = np.zeros(len(q) + 1, dtype=np.int64)
    np.cumsum(q, out=cu[1:])
    return RaggedBatch(
        q_lens=q,
        kv_lens=kv,
        cu_q_lens=cu,
        bounds=bounds,
        chunk_size=chunk_size,
        segmentation=_segmentation_scan(q, chunk_size),
    )


def batch_from_json(text: str) -> RaggedBatch:
    rec = json.loads(text)
    return build(
        rec["q_lens"],
        rec["kv_lens"],
        Bounds(*rec["bounds"]),
        rec.get("chunk_size", DEFAULT_CHUNK_SIZE),
    )


def _class_of(q_len, chunk_size):
    if q_len == 1:
        return 0
    if q_len == chunk_size:
        return 1
    return 2


def reorder(batch: RaggedBatch):
    """Stable partition: decode rows, then fixed-chunk prefill, then the rest.

    Returns (reordered batch, permutation) where permutation[new] = old, so
    outputs computed in the new order can be unpermuted by the caller.
    """
    order = sorted(
        range(batch.num_seqs),
        key=lambda r: (_class_of(int(batch.q_lens[r]), batch.chunk_size), r),
    )
    perm = np.asarray(order, dtype=np.int64)
    permuted = build(
        batch.q_lens[perm], batch.kv_lens[perm], batch.bounds, batch.chunk_size
    )
    return permuted, perm


def dispatch_case(batch: RaggedBatch, seg_range) -> WorkloadCase:
    """Workload case of one of the three segmentation ranges."""
    i, j, k = batch.segmentation
    lo, hi = seg_range
    if (lo, hi) == (0, i):
        return WorkloadCase.DECODE_ONLY
    if (lo, hi) == (i, j):
        return WorkloadCase.PREFILL_ONLY
    if (lo, hi) == (j, k):
        return WorkloadCase.MIXED
    raise InvalidShape(f"range {seg_range} is not a segment of {batch.segmentation}")
