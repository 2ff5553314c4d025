"""Symmetric affine int8/int4 weight quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .tensor import DenseTensor, DType, as_array

QMAX = {8: 127, 4: 7}
GRANULARITIES = ("per_tensor", "per_row")
F32_MAX = float(np.finfo(np.float32).max)
F32_TINY = float(np.finfo(np.float32).tiny)


@dataclass(frozen=True)
class QuantizedTensor:
    qdata: DenseTensor
    scales: np.ndarray
    zero_points: np.ndarray
    original_shape: tuple
    bits: int
    granularity: str

    @property
    def nbytes(self) -> int:
        """Stored bytes: integer payload plus float32 scales."""
        return self.qdata.nbytes + self.scales.size * 4


def _derive_scale(maxabs: np.ndarray, qmax: int) -> np.ndarray:
    return (np.asarray(maxabs, dtype=np.float64) / qmax).astype(np.float32)


def _consistent_scale(maxabs: np.ndarray, qmax: int) -> np.ndarray:
    """Nearest float32 scale above fl(maxabs / qmax) that re-derives itself.

    A scale s is self-consistent when fl(fl(s * qmax) / qmax) == s, i.e.
    re-quantizing the dequantized tensor recovers s. That gives the
    quantize(dequantize(q)) == q fixed point. A few ulps up always suffice in
    practice (a few down at the very top of the float32 range); a
    short-mantissa scale (s * q exact in float32) is the backstop.
    """
    q32 = np.float32(qmax)
    s = _derive_scale(maxabs, qmax)
    with np.errstate(over="ignore"):
        for _ in range(64):
            top = s * q32
            bad = _derive_scale(top, qmax) != s
            if not bad.any():
                return s
            # step down only where s * qmax overflows float32
            target = np.where(np.isinf(top), np.float32(0), np.float32(np.inf))
            s = np.where(bad, np.nextafter(s, target), s)
    bits = 24 - int(qmax).bit_length()
    mant, exp = np.frexp(np.asarray(maxabs, dtype=np.float64) / qmax)
    snapped = np.ldexp(np.ceil(mant * 2.0 ** bits) / 2.0 ** bits, exp).astype(np.float32)
    return np.where(bad, snapped, s)


def quantize_affine(w, bits: int = 8, granularity: str = "per_row") -> QuantizedTensor:
    arr = as_array(w)
    if arr.ndim != 2:
        raise ArgumentError(f"quantize_affine expects a matrix, got shape {arr.shape}")
    if bits not in QMAX:
        raise ArgumentError(f"bits must be 4 or 8, got {bits}")
    if granularity not in GRANULARITIES:
        raise ArgumentError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    a = arr.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ArgumentError("cannot quantize non-finite values")
    qmax = QMAX[bits]

    if granularity == "per_row":
        maxabs = np.max(np.abs(a), axis=1)
    else:
        maxabs = np.array([np.max(np.abs(a))])
    if maxabs.max() > F32_MAX:
        raise ArgumentError(f"magnitude {maxabs.max():.3g} exceeds the float32 range")
    # groups whose scale would underflow float32 are treated as all-zero
    live = maxabs / qmax >= F32_TINY
    scales = np.ones(maxabs.shape, dtype=np.float32)
    if live.any():
        scales[live] = _consistent_scale(maxabs[live], qmax)
    if not np.all(np.isfinite(scales)):
        raise ArgumentError("quantization scale overflows float32")
    if not live.all():
        keep = live[:, None] if granularity == "per_row" else live[0]
        a = np.where(keep, a, 0.0)
    per_elem = scales[:, None] if granularity == "per_row" else scales[0]
    q = np.clip(np.rint(a / per_elem), -qmax, qmax).astype(np.int8)

    storage = DType.I8 if bits == 8 else DType.I4PACKED
    return QuantizedTensor(
        qdata=DenseTensor.from_array(q, storage),
        scales=scales,
        zero_points=np.zeros(scales.shape, dtype=np.int64),
        original_shape=arr.shape,
        bits=bits,
        granularity=granularity,
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """float32 reconstruction ``scale * (q - zero_point)``."""
    codes = q.qdata.to_numpy().reshape(q.original_shape).astype(np.float32)
    zp = q.zero_points.astype(np.float32)
    if q.granularity == "per_row":
        return (codes - zp[:, None]) * q.scales[:, None]
    return (codes - zp[0]) * q.scales[0]


def quantized_nbytes(shape, bits: int, granularity: str) -> int:
    """Byte accounting without materializing: payload + float32 scales."""
    rows, cols = int(shape[0]), int(shape[1])
    count = rows * cols
    payload = count if bits == 8 else (count + 1) // 2
    return payload + 4 * (rows if granularity == "per_row" else 1)
