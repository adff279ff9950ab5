"""Paged KV cache with a merged, interleaved K/V representation.

K and V are merged along the head axis before paging: token t stores rows
K0, V0, K1, V1, ... so that any single-token slice carries both K and V for
every KV head. The merged axis is folded as (ceil(2*h_kv/p_kv), p_kv) so the
packing factor of narrow dtypes becomes an explicit dimension and the
minimum tile applies without implicit padding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, CorruptPageTable, InvalidShape, ParseError
from .numerics import packing_for_bits

SNAPSHOT_MAGIC = b"RPAC"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class KvCacheConfig:
    num_pages: int
    page_size: int
    h_kv: int
    d_k: int
    element_bits: int = 32
    quant_scale_k: float | None = None
    quant_scale_v: float | None = None

    def __post_init__(self):
        if self.num_pages < 1 or self.page_size < 1 or self.h_kv < 1 or self.d_k < 1:
            raise InvalidShape(f"cache dimensions must be positive: {self}")
        packing_for_bits(self.element_bits)  # validates width
        has_scales = self.quant_scale_k is not None and self.quant_scale_v is not None
        if (self.element_bits == 8) != has_scales:
            raise InvalidShape(
                "quantization scales must be present exactly when element_bits == 8"
            )

    @property
    def p_kv(self) -> int:
        return packing_for_bits(self.element_bits)

    @property
    def merged_heads(self) -> int:
        return math.ceil(2 * self.h_kv / self.p_kv)

    @property
    def page_shape(self) -> tuple:
        return (self.page_size, self.merged_heads, self.p_kv, self.d_k)

    @property
    def token_row_elems(self) -> int:
        """Stored elements per token, padding slots included."""
        return self.merged_heads * self.p_kv * self.d_k

    @property
    def token_row_bytes(self) -> int:
        return self.token_row_elems * self.element_bits // 8


@dataclass
class MergedKvBlock:
    """A run of tokens in merged layout plus its absolute start position.

    `base` marks where the run begins in the sequence, which is what splits
    already-cached tokens from newly projected ones during assembly.
    """

    data: np.ndarray  # (tokens, merged_heads, p_kv, d_k)
    base: int = 0

    @property
    def tokens(self) -> int:
        return self.data.shape[0]


@dataclass
class PageTable:
    """Per-sequence ordered page ids and used token counts."""

    page_ids: list = field(default_factory=list)  # list[list[int]]
    used_lens: list = field(default_factory=list)  # tokens already cached

    def __post_init__(self):
        if len(self.page_ids) != len(self.used_lens):
            raise InvalidShape("page_ids and used_lens must have equal length")

    @property
    def num_seqs(self) -> int:
        return len(self.page_ids)

    def validate(self, config: KvCacheConfig, total_lens=None):
        """Check page-count coverage, disjointness, and id range.

        With `total_lens` given (cached + scheduled new tokens), each
        sequence must own exactly ceil(total / page_size) pages; otherwise
        the check uses the current used lengths.
        """
        lens = list(total_lens) if total_lens is not None else self.used_lens
        if len(lens) != self.num_seqs:
            raise InvalidShape("length vector does not match page table")
        seen = {}
        for seq, (ids, n) in enumerate(zip(self.page_ids, lens)):
            want = math.ceil(n / config.page_size)
            if len(ids) != want:
                raise CorruptPageTable(
                    f"sequence {seq}: {len(ids)} pages, needs {want} for {n} tokens"
                )
            for pid in ids:
                if not (0 <= pid < config.num_pages):
                    raise CorruptPageTable(f"page id {pid} out of range")
                if pid in seen:
                    raise CorruptPageTable(
                        f"page {pid} owned by sequences {seen[pid]} and {seq}"
                    )
                seen[pid] = seq


class PagedKvCache:
    """Page pool plus free-list allocation.

    Storage is a numpy array of shape (num_pages, *page_shape); float32 for
    32/16-bit element types (16-bit values are pre-rounded) and int8 for the
    quantized path.
    """

    def __init__(self, config: KvCacheConfig):
        self.config = config
        dtype = np.int8 if config.element_bits == 8 else np.float32
        self.pages = np.zeros((config.num_pages,) + config.page_shape, dtype=dtype)
        self._free = list(range(config.num_pages - 1, -1, -1))

    def allocate(self, tokens: int) -> list:
        """Pop enough pages for `tokens` tokens off the free list."""
        need = math.ceil(tokens / self.config.page_size)
        if need > len(self._free):
            raise CapacityError(f"need {need} pages, {len(self._free)} free")
        return [self._free.pop() for _ in range(need)]

    def extend(self, table: PageTable, seq: int, total_len: int):
        """Grow a sequence's page list to cover total_len tokens."""
        have = len(table.page_ids[seq]) * self.config.page_size
        if total_len > have:
            table.page_ids[seq].extend(self.allocate(total_len - have))


def merge_kv(k: np.ndarray, v: np.ndarray, p_kv: int) -> np.ndarray:
    """Interleave (t, h_kv, d_k) K and V into (t, ceil(2h/p), p, d_k).

    Token t row order is K0, V0, K1, V1, ...; pad slots (when 2*h_kv is not
    a multiple of p_kv) are zero.
    """
    if k.shape != v.shape or k.ndim != 3:
        raise InvalidShape(f"k/v must share shape (t, h_kv, d_k), got {k.shape} vs {v.shape}")
    t, h_kv, d_k = k.shape
    inter = np.stack([k, v], axis=2).reshape(t, 2 * h_kv, d_k)
    merged_heads = math.ceil(2 * h_kv / p_kv)
    pad = merged_heads * p_kv - 2 * h_kv
    if pad:
        inter = np.concatenate(
            [inter, np.zeros((t, pad, d_k), dtype=inter.dtype)], axis=1
        )
    return inter.reshape(t, merged_heads, p_kv, d_k)


def split_kv(merged: np.ndarray, h_kv: int):
    """Exact inverse of merge_kv: recover (k, v) from the merged layout."""
    if merged.ndim != 4:
        raise InvalidShape(f"merged block must be rank 4, got {merged.shape}")
    t, mh, p, d_k = merged.shape
    flat = merged.reshape(t, mh * p, d_k)[:, : 2 * h_kv, :]
    return flat[:, 0::2, :].copy(), flat[:, 1::2, :].copy()


def effective_block_size(l_kv: int, j: int, b_kv: int) -> int:
    """Tokens actually present in KV block j: min(b_kv, l_kv - j*b_kv)."""
    if j < 0 or j * b_kv >= l_kv:
        raise InvalidShape(f"block {j} out of range for {l_kv} tokens at b_kv={b_kv}")
    return min(b_kv, l_kv - j * b_kv)


def gather_block(
    cache: PagedKvCache,
    table: PageTable,
    seq: int,
    block_index: int,
    b_kv: int,
    new_kv: MergedKvBlock | None = None,
):
    """Assemble one contiguous KV block of up to b_kv tokens.

    Positions below the sequence's used length come from cache pages via the
    page table; positions at or beyond it come from `new_kv` (indexed by its
    base). Returns (block, effective_tokens) where block has exactly the
    effective token count.
    """
    cfg = cache.config
    used = table.used_lens[seq]
    l_kv = used if new_kv is None else max(used, new_kv.base + new_kv.tokens)
    eff = effective_block_size(l_kv, block_index, b_kv)
    start = block_index * b_kv

    out = np.zeros((eff,) + cfg.page_shape[1:], dtype=cache.pages.dtype)
    ids = table.page_ids[seq]
    pos = start
    while pos < start + eff:
        if pos < used:
            page_no, in_page = divmod(pos, cfg.page_size)
            if page_no >= len(ids):
                raise CorruptPageTable(f"sequence {seq} missing page {page_no}")
            pid = ids[page_no]
            if not (0 <= pid < cfg.num_pages):
                raise CorruptPageTable(f"page id {pid} out of range")
            take = min(cfg.page_size - in_page, used - pos, start + eff - pos)
            out[pos - start : pos - start + take] = cache.pages[pid][in_page : in_page + take]
        else:
            take = start + eff - pos
            lo = pos - new_kv.base
            out[pos - start : pos - start + take] = new_kv.data[lo : lo + take]
        pos += take
    return out, eff


def scatter_update(cache: PagedKvCache, table: PageTable, seq: int, u_kv: MergedKvBlock):
    """Append u_kv at the sequence's current used length, token granular.

    The caller must have allocated pages covering the new extent; the write
    touches only this sequence's pages and advances its used length.
    """
    cfg = cache.config
    used = table.used_lens[seq]
    if u_kv.base != used:
        raise InvalidShape(
            f"update base {u_kv.base} must equal the cached length {used}"
        )
    if u_kv.tokens == 0:
        return
    end = used + u_kv.tokens
    ids = table.page_ids[seq]
    if end > len(ids) * cfg.page_size:
        raise CapacityError(
            f"sequence {seq}: {end} tokens exceed {len(ids)} allocated pages"
        )
    pos = used
    while pos < end:
        page_no, in_page = divmod(pos, cfg.page_size)
        take = min(cfg.page_size - in_page, end - pos)
        cache.pages[ids[page_no]][in_page : in_page + take] = u_kv.data[
            pos - used : pos - used + take
        ]
        pos += take
    table.used_lens[seq] = end


def dequantize_merged(data: np.ndarray, config: KvCacheConfig) -> np.ndarray:
    """Apply per-tensor K/V scales to a merged int8 block; f32 passthrough."""
    if config.element_bits != 8:
        return np.asarray(data, dtype=np.float32)
    t, mh, p, d_k = data.shape
    flat_idx = np.arange(mh * p).reshape(mh, p)
    scale = np.where(
        flat_idx % 2 == 0, np.float32(config.quant_scale_k), np.float32(config.quant_scale_v)
    )
    return data.astype(np.float32) * scale[None, :, :, None]


def save_cache(path, cache: PagedKvCache, table: PageTable):
    """Binary snapshot: magic, version, JSON header, raw little-endian pages."""
    header = {
        "config": {
            "num_pages": cache.config.num_pages,
            "page_size": cache.config.page_size,
            "h_kv": cache.config.h_kv,
            "d_k": cache.config.d_k,
            "element_bits": cache.config.element_bits,
            "quant_scale_k": cache.config.quant_scale_k,
            "quant_scale_v": cache.config.quant_scale_v,
        },
        "storage_dtype": str(cache.pages.dtype),
        "page_ids": table.page_ids,
        "used_lens": table.used_lens,
    }
    blob = json.dumps(header).encode()
    payload = np.ascontiguousarray(cache.pages).astype(cache.pages.dtype.newbyteorder("<"))
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<II", SNAPSHOT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload.tobytes())


def load_cache(path):
    """Inverse of save_cache; returns (cache, table)."""
    with open(path, "rb") as f:
        if f.read(4) != SNAPSHOT_MAGIC:
            raise ParseError(f"{path}: not a cache snapshot")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != SNAPSHOT_VERSION:
            raise ParseError(f"{path}: unsupported snapshot version {version}")
        header = json.loads(f.read(hlen))
        cfg = KvCacheConfig(**header["config"])
        cache = PagedKvCache(cfg)
        raw = f.read()
    dtype = np.dtype(header["storage_dtype"]).newbyteorder("<")
    pages = np.frombuffer(raw, dtype=dtype).reshape(cache.pages.shape)
    cache.pages = pages.astype(cache.pages.dtype)
    table = PageTable(
        [list(ids) for ids in header["page_ids"]], list(header["used_lens"])
    )
    used = {pid for ids in table.page_ids for pid in ids}
    cache._free = [p for p in range(cfg.num_pages - 1, -1, -1) if p not in used]
    return cache, table
