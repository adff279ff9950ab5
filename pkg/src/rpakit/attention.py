"""Numerically exact attention core: query preprocessing, grouped-head
reshapes, the online-softmax block update, causal masking, and the dense
reference oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRow, InvalidShape, NumericsError

# Additive stand-in for -inf so exp stays well defined on masked entries.
MASK_VALUE = np.float32(-1e30)


@dataclass(frozen=True)
class AttentionConfig:
    h_q: int
    h_kv: int
    d_k: int
    causal: bool = False
    softmax_scale: float | None = None
    p_q: int = 1
    p_kv: int = 1

    def __post_init__(self):
        if self.h_q < 1 or self.h_kv < 1 or self.d_k < 1:
            raise InvalidShape(f"head counts and head dim must be positive: {self}")
        if self.h_q % self.h_kv != 0:
            raise InvalidShape(f"h_q={self.h_q} must be a multiple of h_kv={self.h_kv}")
        if self.softmax_scale is None:
            object.__setattr__(self, "softmax_scale", 1.0 / math.sqrt(self.d_k))

    @property
    def h_g(self) -> int:
        return self.h_q // self.h_kv

    @property
    def group_pad(self) -> int:
        """Padded group extent ceil(h_g / p_q) * p_q."""
        return math.ceil(self.h_g / self.p_q) * self.p_q


@dataclass
class SoftmaxState:
    """Running (max, denominator, accumulator) of the online softmax.

    Arrays may carry arbitrary leading batch axes; the last axis of m/l is
    rows and acc has a trailing d_k axis. Everything is float32.
    """

    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @staticmethod
    def fresh(shape_rows, d_k: int) -> "SoftmaxState":
        shape_rows = tuple(np.atleast_1d(shape_rows))
        return SoftmaxState(
            m=np.full(shape_rows, -np.inf, dtype=np.float32),
            l=np.zeros(shape_rows, dtype=np.float32),
            acc=np.zeros(shape_rows + (d_k,), dtype=np.float32),
        )


def preprocess_q(q: np.ndarray, config: AttentionConfig) -> np.ndarray:
    """Relayout (tokens, h_q, d_k) -> (h_kv, tokens, ceil(h_g/p_q), p_q, d_k).

    Query head h_kv*h_g + g maps to group slot g of KV head h_kv; slots past
    h_g (present when the packing does not divide the group size) are zero.
    """
    if q.ndim != 3 or q.shape[1] != config.h_q or q.shape[2] != config.d_k:
        raise InvalidShape(f"expected (tokens, {config.h_q}, {config.d_k}), got {q.shape}")
    tokens = q.shape[0]
    h_kv, h_g, gp = config.h_kv, config.h_g, config.group_pad
    grouped = q.reshape(tokens, h_kv, h_g, config.d_k)
    if gp != h_g:
        pad = np.zeros((tokens, h_kv, gp - h_g, config.d_k), dtype=q.dtype)
        grouped = np.concatenate([grouped, pad], axis=2)
    out = grouped.transpose(1, 0, 2, 3).reshape(
        h_kv, tokens, gp // config.p_q, config.p_q, config.d_k
    )
    return np.ascontiguousarray(out)


def postprocess_q(pre: np.ndarray, config: AttentionConfig) -> np.ndarray:
    """Exact inverse of preprocess_q, dropping any padded group slots."""
    h_kv, tokens = pre.shape[0], pre.shape[1]
    gp = config.group_pad
    grouped = pre.reshape(h_kv, tokens, gp, config.d_k)[:, :, : config.h_g, :]
    return np.ascontiguousarray(
        grouped.transpose(1, 0, 2, 3).reshape(tokens, config.h_q, config.d_k)
    )


def grouped_q_block(block: np.ndarray, h_g: int) -> np.ndarray:
    """Reshape (c_q, h_g, d_k) to (c_q*h_g, d_k); token t, head g -> row t*h_g + g."""
    if block.ndim != 3 or block.shape[1] != h_g:
        raise InvalidShape(f"expected (c_q, {h_g}, d_k), got {block.shape}")
    return block.reshape(block.shape[0] * h_g, block.shape[2])


def ungroup_output(mat: np.ndarray, h_g: int) -> np.ndarray:
    """Inverse of grouped_q_block: (c_q*h_g, d_k) -> (c_q, h_g, d_k)."""
    rows, d_k = mat.shape
    if rows % h_g != 0:
        raise InvalidShape(f"{rows} rows not divisible by group size {h_g}")
    return mat.reshape(rows // h_g, h_g, d_k)


def causal_mask(q_positions, kv_positions) -> np.ndarray:
    """True where a key is hidden from a query: kv_position > q_position."""
    q = np.asarray(q_positions).reshape(-1, 1)
    kv = np.asarray(kv_positions).reshape(1, -1)
    return kv > q


def flash_block_update(
    state: SoftmaxState,
    c_q: np.ndarray,
    c_k: np.ndarray,
    c_v: np.ndarray,
    mask: np.ndarray | None = None,
    scale: float = 1.0,
    p_dtype: str = "f32",
) -> SoftmaxState:
    """One online-softmax step over a KV compute block.

    S = scale * c_q @ c_k.T, plus MASK_VALUE where masked; then the running
    max / denominator / accumulator are rescaled and extended. Rows whose
    entire block is masked keep their previous max so the state is untouched.
    Leading batch axes are allowed on every operand. `p_dtype` rounds the
    probability matrix to the storage dtype before the value matmul, which
    mirrors a kernel that feeds the MXU from narrow registers.
    """
    if not (np.isfinite(c_q).all() and np.isfinite(c_k).all() and np.isfinite(c_v).all()):
        raise NumericsError("non-finite attention inputs")
    s = np.einsum("...rd,...cd->...rc", c_q, c_k, dtype=np.float32) * np.float32(scale)
    if mask is not None:
        s = s + np.where(mask, MASK_VALUE, np.float32(0.0))
        all_masked = np.broadcast_to(mask, s.shape).all(axis=-1)
    else:
        all_masked = np.zeros(s.shape[:-1], dtype=bool)

    m_new = np.maximum(state.m, s.max(axis=-1))
    m_new = np.where(all_masked, state.m, m_new)
    # exp(m - m_new) with the -inf-minus--inf corner pinned to 0: such rows
    # have l == 0 and acc == 0, so any finite factor is equivalent.
    both_inf = np.isneginf(state.m) & np.isneginf(m_new)
    alpha = np.where(both_inf, np.float32(0.0), np.exp(state.m - np.where(both_inf, 0, m_new)))

    p = np.exp(s - m_new[..., None])
    p = np.where(all_masked[..., None], np.float32(0.0), p).astype(np.float32)
    if p_dtype != "f32":
        from .numerics import round_to

        p = round_to(p_dtype, p)
    l_new = alpha * state.l + p.sum(axis=-1)
    acc_new = alpha[..., None] * state.acc + np.einsum(
        "...rc,...cd->...rd", p, c_v, dtype=np.float32
    )
    return SoftmaxState(
        m=m_new.astype(np.float32), l=l_new.astype(np.float32), acc=acc_new.astype(np.float32)
    )


def finalize(state: SoftmaxState) -> np.ndarray:
    """Divide the accumulator by the softmax denominator row-wise."""
    if np.any(state.l == 0):
        raise DegenerateRow("a query row saw no visible keys")
    return state.acc / state.l[..., None]


def naive_attention(batch, q: np.ndarray, k_seqs, v_seqs, config: AttentionConfig) -> np.ndarray:
    """Dense reference: per sequence, softmax(scale * Q K^T + mask) V in float64.

    q is the ragged (total_tokens, h_q, d_k) stack; k_seqs/v_seqs hold one
    (kv_len, h_kv, d_k) array per sequence covering cached plus new tokens.
    KV heads are walked one at a time to bound the score-matrix size.
    """
    out = np.zeros_like(q, dtype=np.float64)
    scale = float(config.softmax_scale)
    for r in range(batch.num_seqs):
        lo, hi = batch.token_range(r)
        if hi == lo:
            continue
        q_len = hi - lo
        kv_len = int(batch.kv_lens[r])
        q_pos = (kv_len - q_len) + np.arange(q_len)
        kv_pos = np.arange(kv_len)
        mask = causal_mask(q_pos, kv_pos) if config.causal else None
        for h in range(config.h_kv):
            k_h = k_seqs[r][:, h, :].astype(np.float64)
            v_h = v_seqs[r][:, h, :].astype(np.float64)
            for g in range(config.h_g):
                qh = config.h_g * h + g
                s = q[lo:hi, qh, :].astype(np.float64) @ k_h.T * scale
                if mask is not None:
                    s = np.where(mask, -np.inf, s)
                s -= s.max(axis=1, keepdims=True)
                p = np.exp(s)
                out[lo:hi, qh, :] = (p @ v_h) / p.sum(axis=1, keepdims=True)
    return out
