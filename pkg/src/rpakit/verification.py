"""Randomized equivalence harness: blocked kernel vs dense oracle.

Builds seeded ragged batches for each workload case, materializes a paged
cache holding each row's history, runs the blocked kernel, and compares
against the per-sequence dense reference at the dtype's tolerance. Used
by the CLI verify subcommand and by the acceptance suite; everything is
driven by one Generator so a fixed seed reproduces runs bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, naive_attention
from .batch import Bounds, WorkloadCase, build
from .engine import BlockParams, prepare_inputs, rpa_forward
from .errors import InvalidDtype
from .kvcache import (
    KvCacheConfig,
    MergedKvBlock,
    PagedKvCache,
    PageTable,
    merge_kv,
    scatter_update,
)
from .numerics import (
    dequantize_symmetric,
    element_bits,
    packing_for_bits,
    quantize_symmetric,
    round_to,
    scale_for,
)

TOLERANCES = {"f32": 1e-5, "bf16": 2e-2, "fp8": 2e-2}

# kv-head derivation per attention layout, given the query head count
HEAD_LAYOUTS = ("mha", "gqa", "mqa")


def heads_for_layout(layout: str, h_q: int) -> int:
    if layout == "mha":
        return h_q
    if layout == "mqa":
        return 1
    if layout == "gqa":
        for h_kv in (h_q // 4, h_q // 2, 1):
            if h_kv >= 1 and h_q % h_kv == 0:
                return h_kv
    raise ValueError(f"unknown head layout {layout!r}")


def _skewed(rng: np.random.Generator, hi: int) -> int:
    """Mostly-small draw on [1, hi]; long tails keep big blocks exercised."""
    if hi <= 1:
        return 1
    draw = rng.pareto(1.2) * max(2, hi // 64)
    return int(min(hi, max(1, draw)))


def random_lengths(
    rng: np.random.Generator,
    case: WorkloadCase,
    max_n: int = 16,
    max_tokens: int = 4096,
    max_context: int = 1024,
    chunk_size: int = 64,
):
    """Draw (q_lens, kv_lens, chunk_size) typical of one workload case."""
    n = int(rng.integers(1, max_n + 1))
    q_lens, kv_lens = [], []
    budget = max_tokens
    for i in range(n):
        if case is WorkloadCase.DECODE_ONLY:
            q = 1
        elif case is WorkloadCase.PREFILL_ONLY:
            q = chunk_size
        else:
            kind = rng.random()
            if kind < 0.35:
                q = 1
            elif kind < 0.55:
                q = chunk_size
            elif kind < 0.65 and i > 0:
                q = 0  # fully cached row: output-only passenger
            else:
                q = _skewed(rng, min(budget, max_context))
        if q > budget:
            break
        budget -= q
        cached = 0 if rng.random() < 0.3 else _skewed(rng, max_context)
        q_lens.append(q)
        kv_lens.append(q + cached)
    if not q_lens or not any(q_lens):
        q_lens, kv_lens = [1], [1 + _skewed(rng, max_context)]
    return q_lens, kv_lens, chunk_size


def random_blocks(rng: np.random.Generator) -> BlockParams:
    """Small power-of-two blocking with c dividing b."""
    b_q = int(rng.choice([16, 32, 64, 128]))
    b_kv = int(rng.choice([16, 32, 64, 128]))
    c_q = int(rng.choice([c for c in (8, 16, 32, 64, 128) if c <= b_q]))
    c_kv = int(rng.choice([c for c in (8, 16, 32, 64, 128) if c <= b_kv]))
    return BlockParams(b_q, b_kv, c_q, c_kv)


def _to_storage(k, v, ccfg):
    if ccfg.element_bits == 16:
        k, v = round_to("bf16", k), round_to("bf16", v)
    elif ccfg.element_bits == 8:
        k = quantize_symmetric(k, ccfg.quant_scale_k)
        v = quantize_symmetric(v, ccfg.quant_scale_v)
    return merge_kv(k, v, ccfg.p_kv)


def build_scenario(rng, q_lens, kv_lens, config, dtype="f32", page_size=16,
                   blocks=None, chunk_size=None):
    """Random cache + batch where each row has kv_len - q_len tokens cached.

    Returns (inputs, oracle) where oracle = (q, k_seqs, v_seqs) holds the
    values the kernel actually computes on (rounded / dequantized), ready
    for naive_attention.
    """
    if dtype not in TOLERANCES:
        raise InvalidDtype(f"unknown dtype {dtype!r}")
    bits = element_bits(dtype)
    n = len(q_lens)
    kwargs = {} if chunk_size is None else {"chunk_size": chunk_size}
    batch = build(q_lens, kv_lens, Bounds(max(sum(q_lens), 1), n), **kwargs)
    k_full = [rng.standard_normal((m, config.h_kv, config.d_k)).astype(np.float32) for m in kv_lens]
    v_full = [rng.standard_normal((m, config.h_kv, config.d_k)).astype(np.float32) for m in kv_lens]
    scales = {}
    if bits == 8:
        scales = dict(
            quant_scale_k=scale_for(np.concatenate([k.ravel() for k in k_full])),
            quant_scale_v=scale_for(np.concatenate([v.ravel() for v in v_full])),
        )
    num_pages = sum(math.ceil(m / page_size) for m in kv_lens) + 1
    ccfg = KvCacheConfig(num_pages, page_size, config.h_kv, config.d_k,
                         element_bits=bits, **scales)
    cache = PagedKvCache(ccfg)
    table = PageTable(page_ids=[cache.allocate(m) for m in kv_lens], used_lens=[0] * n)
    for r in range(n):
        cached = kv_lens[r] - q_lens[r]
        if cached:
            data = _to_storage(k_full[r][:cached], v_full[r][:cached], ccfg)
            scatter_update(cache, table, r, MergedKvBlock(data, base=0))
    q = rng.standard_normal((batch.total_tokens, config.h_q, config.d_k)).astype(np.float32)
    new_k = [k_full[r][kv_lens[r] - q_lens[r]:] if q_lens[r] else None for r in range(n)]
    new_v = [v_full[r][kv_lens[r] - q_lens[r]:] if q_lens[r] else None for r in range(n)]
    inputs = prepare_inputs(batch, q, new_k, new_v, cache, table, config, blocks)

    if bits == 16:
        oq = round_to("bf16", q)
        oks = [round_to("bf16", k) for k in k_full]
        ovs = [round_to("bf16", v) for v in v_full]
    elif bits == 8:
        oq = round_to("bf16", q)
        oks = [dequantize_symmetric(quantize_symmetric(k, scales["quant_scale_k"]),
                                    scales["quant_scale_k"]) for k in k_full]
        ovs = [dequantize_symmetric(quantize_symmetric(v, scales["quant_scale_v"]),
                                    scales["quant_scale_v"]) for v in v_full]
    else:
        oq, oks, ovs = q, k_full, v_full
    return inputs, (oq, oks, ovs)


def check_once(rng, case, causal, h_q, h_kv, d_k, dtype, *,
               max_n=16, max_tokens=4096, max_context=1024) -> float:
    """One random batch through kernel and oracle; returns max-abs error."""
    pack = packing_for_bits(element_bits(dtype))
    config = AttentionConfig(h_q=h_q, h_kv=h_kv, d_k=d_k, causal=causal,
                             p_q=pack, p_kv=pack)
    q_lens, kv_lens, chunk = random_lengths(
        rng, case, max_n=max_n, max_tokens=max_tokens, max_context=max_context
    )
    inputs, (oq, oks, ovs) = build_scenario(
        rng, q_lens, kv_lens, config, dtype=dtype,
        blocks=random_blocks(rng), chunk_size=chunk,
    )
    out, _, _ = rpa_forward(inputs)
    want = naive_attention(inputs.batch, oq, oks, ovs, config)
    if out.size == 0:
        return 0.0
    return float(np.max(np.abs(out.astype(np.float64) - want)))


@dataclass(frozen=True)
class CheckResult:
    """Aggregated verdict for one (case, causal, layout, dtype) combo."""

    case: WorkloadCase
    causal: bool
    layout: str
    dtype: str
    batches: int
    max_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tolerance

    @property
    def label(self) -> str:
        mask = "causal" if self.causal else "full"
        return f"{self.case.name.lower()}/{mask}/{self.layout}/{self.dtype}"


def run_matrix(
    h_q: int,
    d_k: int,
    seed: int = 0,
    batches: int = 2,
    dtypes=("f32", "bf16", "fp8"),
    layouts=HEAD_LAYOUTS,
    cases=tuple(WorkloadCase),
    tolerance: float | None = None,
    max_n: int = 16,
    max_tokens: int = 4096,
    max_context: int = 1024,
) -> list[CheckResult]:
    """The full verification sweep; one result per combo, worst error kept.

    A tolerance override applies to every dtype (a zero override makes
    any run fail, which is the intended smoke test of the harness).
    """
    rng = np.random.default_rng(seed)
    results = []
    for dtype in dtypes:
        tol = TOLERANCES[dtype] if tolerance is None else tolerance
        for case in cases:
            for causal in (True, False):
                for layout in layouts:
                    h_kv = heads_for_layout(layout, h_q)
                    err = 0.0
                    for _ in range(batches):
                        err = max(err, check_once(
                            rng, case, causal, h_q, h_kv, d_k, dtype,
                            max_n=max_n, max_tokens=max_tokens,
                            max_context=max_context,
                        ))
                    results.append(CheckResult(
                        case=case, causal=causal, layout=layout, dtype=dtype,
                        batches=batches, max_err=err, tolerance=tol,
                    ))
    return results
