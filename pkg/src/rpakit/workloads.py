"""Seedable workload generators: decode/prefill sweeps and mixed batches
with uniform, bimodal, and long-tail length distributions."""

from __future__ import annotations

import numpy as np

from .batch import DEFAULT_CHUNK_SIZE, Bounds, RaggedBatch, build

DISTRIBUTIONS = ("uniform", "bimodal", "longtail")


def decode_batch(n: int, context_length: int, bounds: Bounds | None = None) -> RaggedBatch:
    """n single-token sequences, each with `context_length` total context."""
    if bounds is None:
        bounds = Bounds(max(n, 1), max(n, 1))
    return build([1] * n, [context_length] * n, bounds)


def prefill_batch(
    s: int, chunk_size: int | None = None, bounds: Bounds | None = None
) -> RaggedBatch:
    """One from-scratch prefill sequence of s tokens.

    Setting chunk_size == s classifies it into the fixed-chunk prefill
    segment, which is how the length sweeps are dispatched.
    """
    if chunk_size is None:
        chunk_size = s
    if bounds is None:
        bounds = Bounds(s, 1)
    return build([s], [s], bounds, chunk_size=chunk_size)


def mixed_batch(
    rng: np.random.Generator,
    n: int,
    distribution: str = "uniform",
    max_q: int = 512,
    max_context: int = 4096,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    bounds: Bounds | None = None,
) -> RaggedBatch:
    """Random ragged batch mixing decode rows, chunk rows, and odd lengths."""
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {distribution!r}, expected {DISTRIBUTIONS}")
    q_lens = []
    kv_lens = []
    for _ in range(n):
        kind = rng.random()
        if kind < 0.4:
            q = 1
        elif kind < 0.6:
            q = chunk_size
        else:
            q = int(rng.integers(2, max(3, max_q)))
        if distribution == "uniform":
            ctx = int(rng.integers(0, max_context))
        elif distribution == "bimodal":
            short = rng.random() < 0.85
            hi = max_context // 8 if short else max_context
            ctx = int(rng.integers(0, hi))
        else:  # longtail
            frac = rng.pareto(2.0)
            ctx = int(min(max_context - 1, frac * max_context / 16))
        q_lens.append(q)
        kv_lens.append(q + ctx)
    if bounds is None:
        bounds = Bounds(int(sum(q_lens)), n)
    return build(q_lens, kv_lens, bounds, chunk_size=chunk_size)


def sweep_lengths(lo: int = 512, hi: int = 32768):
    """The doubling ladder used by the length sweeps: 512, 1024, ..., 32768."""
    out = []
    v = lo
    while v <= hi:
        out.append(v)
        v *= 2
    return out
