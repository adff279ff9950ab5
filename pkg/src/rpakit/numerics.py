"""Narrow-dtype emulation on top of float32 arrays.

All compute in the package runs in numpy float32/float64; "bf16" and "fp8"
are emulated by rounding values to the representable grid while keeping
float32 storage. Accumulators always stay in float32 or wider.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidDtype

# Supported element types: name -> bits. Packing is 32 / bits, i.e. how many
# elements share one 32-bit physical word.
_DTYPE_BITS = {"f32": 32, "bf16": 16, "fp8": 8}


def element_bits(dtype: str) -> int:
    try:
        return _DTYPE_BITS[dtype]
    except KeyError:
        raise InvalidDtype(f"unsupported dtype {dtype!r}, expected one of {sorted(_DTYPE_BITS)}")


def element_bytes(dtype: str) -> int:
    return element_bits(dtype) // 8


def packing_of(dtype: str) -> int:
    """Elements per 32-bit word: f32 -> 1, bf16 -> 2, fp8 -> 4."""
    return 32 // element_bits(dtype)


def packing_for_bits(bits: int) -> int:
    if bits not in (8, 16, 32):
        raise InvalidDtype(f"unsupported element width {bits} bits")
    return 32 // bits


def round_bf16(x: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (round-to-nearest-even).

    Uses the standard bias trick on the raw bit pattern: add 0x7FFF plus the
    lowest kept mantissa bit, then truncate to the high 16 bits.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    u = x.view(np.uint32).astype(np.uint64)
    rounded = u + 0x7FFF + ((u >> 16) & 1)
    out = ((rounded & 0xFFFF0000) % (1 << 32)).astype(np.uint32).view(np.float32)
    # Rounding must never turn a NaN into inf; keep NaNs as-is.
    nan = np.isnan(x)
    if nan.any():
        out = np.where(nan, x, out)
    return out


def quantize_symmetric(x: np.ndarray, scale: float) -> np.ndarray:
    """Per-tensor symmetric int8 quantization, round-half-even.

    Returns int8 codes in [-127, 127]; dequantize with code * scale.
    """
    if scale <= 0:
        raise InvalidDtype(f"quantization scale must be positive, got {scale}")
    codes = np.rint(np.asarray(x, dtype=np.float32) / np.float32(scale))
    return np.clip(codes, -127, 127).astype(np.int8)


def dequantize_symmetric(codes: np.ndarray, scale: float) -> np.ndarray:
    return codes.astype(np.float32) * np.float32(scale)


def scale_for(x: np.ndarray) -> float:
    """Per-tensor scale so that max |x| maps to code 127."""
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0:
        return 1.0
    return amax / 127.0


def round_to(dtype: str, x: np.ndarray) -> np.ndarray:
    """Round values onto the representable grid of `dtype` (f32 is identity).

    For fp8 this quantize-dequantizes with a per-call per-tensor scale; use
    the explicit quantize helpers when the scale must be shared across calls.
    """
    bits = element_bits(dtype)
    if bits == 32:
        return np.asarray(x, dtype=np.float32)
    if bits == 16:
        return round_bf16(x)
    scale = scale_for(np.asarray(x))
    return dequantize_symmetric(quantize_symmetric(x, scale), scale)
