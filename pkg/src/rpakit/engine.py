"""Fused paged-attention kernel engine.

Walks ragged batches in the pipelined block order (query blocks outer, KV
blocks inner, next-block prefetch one step ahead), gathers paged KV, runs the
online-softmax compute tiles, writes new KV back to the cache during the last
query block, and emits the event trace that the pipeline simulator replays.
The same walk runs in a metadata-only mode that produces the trace without
touching any tensor data, so large workloads can be modeled without
materializing their caches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import SoftmaxState, causal_mask, finalize, flash_block_update
from .batch import RaggedBatch, WorkloadCase, reorder
from .errors import InvalidDtype, InvalidShape
from .kvcache import (
    MergedKvBlock,
    dequantize_merged,
    effective_block_size,
    merge_kv,
)
from .numerics import element_bits, quantize_symmetric, round_to
from .trace import Event, EventTrace


@dataclass(frozen=True)
class BlockParams:
    """DMA block sizes (b_q, b_kv tokens) and compute tile sizes (c_q, c_kv)."""

    b_q: int
    b_kv: int
    c_q: int
    c_kv: int

    def __post_init__(self):
        if min(self.b_q, self.b_kv, self.c_q, self.c_kv) < 1:
            raise InvalidShape(f"block sizes must be positive: {self}")
        if self.b_q % self.c_q or self.b_kv % self.c_kv:
            raise InvalidShape(f"compute tiles must divide their blocks: {self}")

    def astuple(self):
        return (self.b_q, self.b_kv, self.c_q, self.c_kv)


DEFAULT_BLOCKS = BlockParams(b_q=256, b_kv=512, c_q=256, c_kv=256)


@dataclass
class KernelInputs:
    batch: RaggedBatch
    q: np.ndarray  # preprocessed (h_kv, total_tokens, group_pad/p_q, p_q, d_k)
    new_kv: list  # per sequence: MergedKvBlock in cache storage dtype, or None
    cache: "PagedKvCache"
    table: "PageTable"
    config: "AttentionConfig"
    blocks: dict = field(default_factory=dict)  # WorkloadCase -> BlockParams


def _blocks_map(blocks) -> dict:
    if blocks is None:
        return {}
    if isinstance(blocks, BlockParams):
        return {case: blocks for case in WorkloadCase}
    return dict(blocks)


def _qo_bytes(kv_bits: int) -> int:
    # queries/outputs ride in 16-bit when the cache is 8-bit
    return 2 if kv_bits == 8 else kv_bits // 8


def strided_kv_view(flat: np.ndarray, head: int, h_kv: int, p_kv: int, which: str = "k"):
    """One head's K or V rows out of a flattened merged block, no copy.

    `flat` is (tokens * merged_heads * p_kv, d_k); K of head h sits at slot
    2h within each token's row group and V at 2h + 1.
    """
    stride = math.ceil(2 * h_kv / p_kv) * p_kv
    if which not in ("k", "v"):
        raise InvalidShape(f"which must be 'k' or 'v', got {which!r}")
    start = 2 * head + (0 if which == "k" else 1)
    return flat[start::stride]


def prepare_inputs(batch, q, new_k, new_v, cache, table, config, blocks=None) -> KernelInputs:
    """Convert raw tensors into kernel form for the cache's storage dtype.

    q is the ragged (total_tokens, h_q, d_k) query stack; new_k/new_v hold one
    (q_len, h_kv, d_k) array per sequence (None where a row brings no new
    tokens). Queries are rounded to the compute dtype; new KV is rounded or
    quantized, merged into the interleaved page row format, and based at each
    sequence's current cached length.
    """
    from .attention import preprocess_q

    bits = cache.config.element_bits
    q = np.asarray(q, dtype=np.float32)
    if bits == 16:
        q = round_to("bf16", q)
    elif bits == 8:
        q = round_to("bf16", q)  # 16-bit activations alongside the 8-bit cache
    merged = []
    for r in range(batch.num_seqs):
        n_new = int(batch.q_lens[r])
        if n_new == 0:
            merged.append(None)
            continue
        k = np.asarray(new_k[r], dtype=np.float32)
        v = np.asarray(new_v[r], dtype=np.float32)
        if bits == 16:
            k, v = round_to("bf16", k), round_to("bf16", v)
        elif bits == 8:
            k = quantize_symmetric(k, cache.config.quant_scale_k)
            v = quantize_symmetric(v, cache.config.quant_scale_v)
        data = merge_kv(k, v, config.p_kv)
        merged.append(MergedKvBlock(data, base=int(table.used_lens[r])))
    return KernelInputs(
        batch=batch,
        q=preprocess_q(q, config),
        new_kv=merged,
        cache=cache,
        table=table,
        config=config,
        blocks=_blocks_map(blocks),
    )


@dataclass
class _SeqPlan:
    orig: int
    l_q: int
    l_kv: int
    used: int
    params: BlockParams
    skip: bool
    t_q: int
    t_kv: int

    def executed_js(self, i: int):
        if not self.skip:
            return range(self.t_kv)
        q_max = (self.l_kv - self.l_q) + min((i + 1) * self.params.b_q, self.l_q) - 1
        return range(min(q_max // self.params.b_kv + 1, self.t_kv))

    def update_overlap(self, j: int) -> int:
        lo = max(self.used, j * self.params.b_kv)
        hi = min(self.l_kv, (j + 1) * self.params.b_kv)
        return max(0, hi - lo)


def _plan(batch, config, blocks, block_skip):
    """Per-sequence walk parameters in dispatch order."""
    blocks = _blocks_map(blocks)
    reordered, perm = reorder(batch)
    plans = []
    for (lo, hi), case in reordered.segments():
        params = blocks.get(case, DEFAULT_BLOCKS)
        if case is WorkloadCase.DECODE_ONLY:
            # single-token queries: unit q block avoids static tile padding
            params = BlockParams(1, params.b_kv, 1, params.c_kv)
        if block_skip is None:
            skip = case is WorkloadCase.PREFILL_ONLY
        else:
            skip = block_skip
        skip = skip and config.causal
        for rr in range(lo, hi):
            orig = int(perm[rr])
            l_q = int(batch.q_lens[orig])
            if l_q == 0:
                continue
            l_kv = int(batch.kv_lens[orig])
            plans.append(
                _SeqPlan(
                    orig=orig,
                    l_q=l_q,
                    l_kv=l_kv,
                    used=l_kv - l_q,
                    params=params,
                    skip=skip,
                    t_q=math.ceil(l_q / params.b_q),
                    t_kv=math.ceil(l_kv / params.b_kv),
                )
            )
    return plans


def _pair_flops(plan: _SeqPlan, i: int, j: int, config) -> int:
    """MXU flops for one (q block, kv block) pair.

    Each executed (kv tile, q tile, head) runs two rows x cols x d_k matmuls
    over c_q * h_g static rows and the tile's effective column count. The q
    tile count ceil(b_q / c_q) is static, so short final blocks still pay for
    full tiles; causally dead tiles are skipped at tile granularity.
    """
    b_q, b_kv, c_q, c_kv = plan.params.astuple()
    eff = effective_block_size(plan.l_kv, j, b_kv)
    n_x = math.ceil(eff / c_kv)
    c_eff = np.minimum(c_kv, eff - np.arange(n_x) * c_kv)
    if not config.causal:
        cols = int(c_eff.sum()) * (b_q // c_q)
    else:
        n_y = b_q // c_q
        kv_first = j * b_kv + np.arange(n_x) * c_kv
        q_hi = np.minimum(i * b_q + (np.arange(n_y) + 1) * c_q, plan.l_q)
        q_max = (plan.l_kv - plan.l_q) + q_hi - 1
        live = kv_first[None, :] <= q_max[:, None]
        cols = int((live * c_eff[None, :]).sum())
    return 4 * c_q * config.h_g * config.d_k * cols * config.h_kv


class _Walk:
    """Shared engine walk; numerics ride along when kernel inputs are given."""

    def __init__(self, batch, config, blocks, kv_bits, block_skip, odd_bank_stride, inputs=None):
        self.batch = batch
        self.config = config
        self.kv_bits = kv_bits
        self.inputs = inputs
        self.plans = _plan(batch, config, blocks, block_skip)
        self.trace = EventTrace()
        mh = math.ceil(2 * config.h_kv / config.p_kv)
        self.row_stride = mh * config.p_kv
        self.row_bytes = self.row_stride * config.d_k * kv_bits // 8
        self.qo_bytes = _qo_bytes(kv_bits)
        self.bank_stride = self.row_stride + (1 if odd_bank_stride else 0)
        if inputs is not None:
            total = batch.total_tokens
            self.out = np.zeros((total, config.h_q, config.d_k), dtype=np.float32)
            self.p_dtype = "bf16" if kv_bits == 16 else "f32"

    def _emit(self, kind, plan, block, nbytes=0, flops=0):
        extra = {}
        if kind == "compute":
            extra = dict(
                rows=plan.params.c_q * self.config.h_g,
                cols=plan.params.c_kv,
                d_k=self.config.d_k,
                bank_stride=self.bank_stride,
            )
        self.trace.append(Event(kind, plan.orig, tuple(block), nbytes, flops, **extra))

    def _fetch_q_bytes(self, plan, i):
        eff = min(plan.params.b_q, plan.l_q - i * plan.params.b_q)
        return eff * self.config.h_q * self.config.d_k * self.qo_bytes

    def run(self):
        qchain = [(p, i) for p in self.plans for i in range(p.t_q)]
        kvchain = [(p, i, j) for p in self.plans for i in range(p.t_q) for j in p.executed_js(i)]
        if not qchain:
            return self.trace
        qpos = kvpos = 0

        def fetch_next_q():
            nonlocal qpos
            if qpos < len(qchain):
                p, i = qchain[qpos]
                self._emit("fetch_q", p, (i,), self._fetch_q_bytes(p, i))
                qpos += 1

        def fetch_next_kv():
            nonlocal kvpos
            if kvpos < len(kvchain):
                p, i, j = kvchain[kvpos]
                eff = effective_block_size(p.l_kv, j, p.params.b_kv)
                self._emit("fetch_kv", p, (i, j), eff * self.row_bytes)
                kvpos += 1

        fetch_next_q()
        fetch_next_kv()
        for p, i in qchain:
            fetch_next_q()
            state = self._begin_q_block(p, i) if self.inputs else None
            for j in p.executed_js(i):
                fetch_next_kv()
                overlap = p.update_overlap(j) if i + 1 == p.t_q else 0
                if overlap:
                    self._emit("update_kv", p, (i, j), overlap * self.row_bytes)
                    if self.inputs:
                        self._apply_update(p, j)
                self._emit("compute", p, (i, j), flops=_pair_flops(p, i, j, self.config))
                if self.inputs:
                    state = self._compute_pair(p, i, j, state)
            self._emit("send_o", p, (i,), self._fetch_q_bytes(p, i))
            if self.inputs:
                self._finish_q_block(p, i, state)
        return self.trace

    # numerics half

    def _begin_q_block(self, plan, i):
        cfg = self.config
        b_q = plan.params.b_q
        t0, t1 = i * b_q, min((i + 1) * b_q, plan.l_q)
        lo, _ = self.batch.token_range(plan.orig)
        pre = self.inputs.q[:, lo + t0 : lo + t1]
        n = t1 - t0
        gp = cfg.group_pad
        grouped = pre.reshape(cfg.h_kv, n, gp, cfg.d_k)[:, :, : cfg.h_g, :]
        q_mat = grouped.reshape(cfg.h_kv, n * cfg.h_g, cfg.d_k).astype(np.float32)
        state = SoftmaxState.fresh((cfg.h_kv, n * cfg.h_g), cfg.d_k)
        return q_mat, state

    def _gather(self, plan, j):
        from .kvcache import gather_block

        block, eff = gather_block(
            self.inputs.cache,
            self.inputs.table,
            plan.orig,
            j,
            plan.params.b_kv,
            new_kv=self.inputs.new_kv[plan.orig],
        )
        flat = dequantize_merged(block, self.inputs.cache.config).reshape(-1, self.config.d_k)
        ks = np.stack(
            [strided_kv_view(flat, h, self.config.h_kv, self.config.p_kv, "k")
             for h in range(self.config.h_kv)]
        )
        vs = np.stack(
            [strided_kv_view(flat, h, self.config.h_kv, self.config.p_kv, "v")
             for h in range(self.config.h_kv)]
        )
        return ks, vs, eff

    def _compute_pair(self, plan, i, j, state):
        cfg = self.config
        q_mat, soft = state
        ks, vs, eff = self._gather(plan, j)
        b_q, b_kv, _, c_kv = plan.params.astuple()
        t0 = i * b_q
        n = q_mat.shape[1] // cfg.h_g
        if cfg.causal:
            tok = t0 + np.repeat(np.arange(n), cfg.h_g)
            q_abs = (plan.l_kv - plan.l_q) + tok
            q_max = int(q_abs.max())
        for x in range(math.ceil(eff / c_kv)):
            k0 = x * c_kv
            k1 = min(k0 + c_kv, eff)
            kv_abs0 = j * b_kv + k0
            mask = None
            if cfg.causal:
                if kv_abs0 > q_max:
                    break  # later tiles in this block are fully dead too
                mask = causal_mask(q_abs, kv_abs0 + np.arange(k1 - k0))
            soft = flash_block_update(
                soft,
                q_mat,
                ks[:, k0:k1],
                vs[:, k0:k1],
                mask=mask,
                scale=cfg.softmax_scale,
                p_dtype=self.p_dtype,
            )
        return q_mat, soft

    def _apply_update(self, plan, j):
        from .kvcache import scatter_update

        new = self.inputs.new_kv[plan.orig]
        b_kv = plan.params.b_kv
        lo = max(self.inputs.table.used_lens[plan.orig], j * b_kv)
        hi = min(plan.l_kv, (j + 1) * b_kv)
        piece = MergedKvBlock(new.data[lo - new.base : hi - new.base], base=lo)
        scatter_update(self.inputs.cache, self.inputs.table, plan.orig, piece)

    def _finish_q_block(self, plan, i, state):
        cfg = self.config
        q_mat, soft = state
        res = finalize(soft)  # (h_kv, n*h_g, d_k)
        n = q_mat.shape[1] // cfg.h_g
        out = res.reshape(cfg.h_kv, n, cfg.h_g, cfg.d_k).transpose(1, 0, 2, 3)
        out = out.reshape(n, cfg.h_q, cfg.d_k)
        if self.kv_bits == 16:
            out = round_to("bf16", out)
        lo, _ = self.batch.token_range(plan.orig)
        t0 = i * plan.params.b_q
        self.out[lo + t0 : lo + t0 + n] = out


def _validate_inputs(inputs):
    cfg = inputs.config
    cache_cfg = inputs.cache.config
    if (cache_cfg.h_kv, cache_cfg.d_k) != (cfg.h_kv, cfg.d_k):
        raise InvalidShape(
            f"cache geometry ({cache_cfg.h_kv}, {cache_cfg.d_k}) does not match "
            f"attention config ({cfg.h_kv}, {cfg.d_k})"
        )
    if cache_cfg.p_kv != cfg.p_kv:
        raise InvalidShape(f"cache packing {cache_cfg.p_kv} != config p_kv {cfg.p_kv}")
    total = inputs.batch.total_tokens
    want = (cfg.h_kv, total, cfg.group_pad // cfg.p_q, cfg.p_q, cfg.d_k)
    if inputs.q.shape != want:
        raise InvalidShape(f"preprocessed q shape {inputs.q.shape}, expected {want}")
    if len(inputs.new_kv) != inputs.batch.num_seqs:
        raise InvalidShape("new_kv must hold one entry per sequence")
    for r in range(inputs.batch.num_seqs):
        n_new = int(inputs.batch.q_lens[r])
        new = inputs.new_kv[r]
        used = int(inputs.table.used_lens[r])
        if n_new == 0:
            if new is not None and new.tokens:
                raise InvalidShape(f"sequence {r} has no queries but new KV tokens")
            if used != int(inputs.batch.kv_lens[r]):
                raise InvalidShape(f"sequence {r}: cached {used} != kv_len with no new tokens")
            continue
        if new is None or new.tokens != n_new:
            raise InvalidShape(f"sequence {r}: expected {n_new} new KV tokens")
        if new.base != used:
            raise InvalidShape(f"sequence {r}: new KV base {new.base} != cached length {used}")
        if used + n_new != int(inputs.batch.kv_lens[r]):
            raise InvalidShape(f"sequence {r}: cached {used} + new {n_new} != kv_len")
    inputs.table.validate(cache_cfg, total_lens=inputs.batch.kv_lens)


def rpa_forward(inputs: KernelInputs, *, block_skip=None, odd_bank_stride=True):
    """Run the fused kernel: attention outputs plus in-place cache update.

    Returns (outputs, cache, trace); outputs land at each token's original
    batch position regardless of the internal dispatch reorder. block_skip
    None means the per-case default (skip causally dead KV blocks in the
    uniform-chunk prefill path, fetch everything in the mixed path).
    """
    _validate_inputs(inputs)
    walk = _Walk(
        inputs.batch,
        inputs.config,
        inputs.blocks,
        inputs.cache.config.element_bits,
        block_skip,
        odd_bank_stride,
        inputs=inputs,
    )
    trace = walk.run()
    return walk.out, inputs.cache, trace


def trace_workload(batch, config, blocks, *, dtype="bf16", block_skip=None, odd_bank_stride=True):
    """Emit the kernel's event trace without touching tensor data.

    Produces exactly the trace rpa_forward would for a workload whose cached
    length is kv_len - q_len per sequence, which makes modeling large
    workloads cheap: no pages, queries, or outputs are allocated.
    """
    if dtype not in ("f32", "bf16", "fp8"):
        raise InvalidDtype(f"unknown dtype {dtype!r}")
    walk = _Walk(batch, config, blocks, element_bits(dtype), block_skip, odd_bank_stride)
    return walk.run()
