"""Dense tensor values and the numerical primitives built on them.

``DenseTensor`` is the storage-level value (what goes into checkpoints);
arithmetic happens on plain numpy arrays widened to at least float32.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ArgumentError, SvdConvergenceError


class DType(str, enum.Enum):
    F64 = "f64"
    F32 = "f32"
    F16 = "f16"
    I8 = "i8"
    I4PACKED = "i4packed"

    @property
    def itemsize(self) -> float:
        return 0.5 if self is DType.I4PACKED else np.dtype(_NUMPY[self]).itemsize

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype(_NUMPY[self])

    @property
    def is_float(self) -> bool:
        return self in (DType.F64, DType.F32, DType.F16)

    @classmethod
    def parse(cls, value) -> "DType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ArgumentError(f"unknown dtype {value!r}") from None


_NUMPY = {
    DType.F64: np.float64,
    DType.F32: np.float32,
    DType.F16: np.float16,
    DType.I8: np.int8,
    DType.I4PACKED: np.uint8,
}
_FROM_NUMPY = {np.dtype(v): k for k, v in _NUMPY.items() if k is not DType.I4PACKED}


def pack_int4(values: np.ndarray) -> np.ndarray:
    """Pack integers in [-8, 7] two per byte, low nibble first."""
    flat = np.asarray(values).reshape(-1).astype(np.int16)
    if flat.size and (flat.min() < -8 or flat.max() > 7):
        raise ArgumentError("int4 values must lie in [-8, 7]")
    nibbles = (flat & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)


def unpack_int4(buffer: np.ndarray, count: int) -> np.ndarray:
    buf = np.asarray(buffer, dtype=np.uint8)
    nibbles = np.empty(buf.size * 2, dtype=np.int8)
    nibbles[0::2] = (buf & 0xF).astype(np.int8)
    nibbles[1::2] = (buf >> 4).astype(np.int8)
    # sign-extend 4-bit two's complement
    return ((nibbles[:count] ^ 8) - 8).astype(np.int8)


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Immutable n-d array with an explicit storage dtype.

    For ``i4packed`` the ``data`` field is the flat packed byte buffer;
    for every other dtype it is a read-only array of the logical shape.
    Equality is bit-exact.
    """

    shape: tuple
    dtype: DType
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s < 1 for s in shape):
            raise ArgumentError(f"shape entries must be >= 1 and rank >= 1, got {shape}")
        dtype = DType.parse(self.dtype)
        data = np.ascontiguousarray(self.data, dtype=_NUMPY[dtype])
        count = math.prod(shape)
        if dtype is DType.I4PACKED:
            data = data.reshape(-1)
            if data.size != (count + 1) // 2:
                raise ArgumentError(
                    f"i4packed buffer holds {data.size} bytes, expected {(count + 1) // 2}")
        elif data.size != count:
            raise ArgumentError(f"data has {data.size} elements, shape {shape} needs {count}")
        else:
            data = data.reshape(shape)
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, dtype=None) -> "DenseTensor":
        arr = np.asarray(array)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if dtype is None:
            try:
                dtype = _FROM_NUMPY[arr.dtype]
            except KeyError:
                if np.issubdtype(arr.dtype, np.floating):
                    dtype = DType.F64
                else:
                    raise ArgumentError(f"cannot infer storage dtype for {arr.dtype}") from None
        dtype = DType.parse(dtype)
        if dtype is DType.I4PACKED:
            return cls(arr.shape, dtype, pack_int4(arr))
        return cls(arr.shape, dtype, arr.astype(_NUMPY[dtype], copy=False))

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def to_numpy(self) -> np.ndarray:
        """Logical values; i4packed is unpacked to int8."""
        if self.dtype is DType.I4PACKED:
            return unpack_int4(self.data, self.numel).reshape(self.shape)
        return self.data

    def tobytes(self) -> bytes:
        """Little-endian payload bytes."""
        data = self.data
        if data.dtype.byteorder == ">":
            data = data.byteswap().view(data.dtype.newbyteorder("<"))
        return data.tobytes(order="C")

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return (self.shape == other.shape and self.dtype is other.dtype
                and self.tobytes() == other.tobytes())

    __hash__ = None

    def __repr__(self):
        return f"DenseTensor(shape={self.shape}, dtype={self.dtype.value})"


def as_array(t, widen=True) -> np.ndarray:
    """Numeric view of a DenseTensor or array-like; float16 widens to float32."""
    arr = t.to_numpy() if isinstance(t, DenseTensor) else np.asarray(t)
    if widen and arr.dtype == np.float16:
        arr = arr.astype(np.float32)
    return arr


def permute_axes(t: DenseTensor, perm: Sequence[int]) -> DenseTensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(t.rank)):
        raise ArgumentError(f"{perm} is not a permutation of 0..{t.rank - 1}")
    values = np.ascontiguousarray(np.transpose(t.to_numpy(), perm))
    return DenseTensor.from_array(values, t.dtype)


def reshape(t: DenseTensor, new_shape: Sequence[int]) -> DenseTensor:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape) or math.prod(new_shape) != t.numel:
        raise ArgumentError(f"cannot reshape {t.shape} ({t.numel} elements) to {new_shape}")
    if t.dtype is DType.I4PACKED:
        return DenseTensor(new_shape, t.dtype, t.data)
    return DenseTensor(new_shape, t.dtype, t.data.reshape(new_shape))


def frobenius_norm(t) -> float:
    if isinstance(t, DenseTensor) and t.dtype is DType.I4PACKED:
        raise ArgumentError("frobenius_norm is undefined on packed int4 storage")
    arr = as_array(t).astype(np.float64, copy=False)
    return float(np.sqrt(np.sum(arr * arr)))


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray
    rank_kept: int
    discarded_weight: float


def _full_svd(a: np.ndarray):
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
    except np.linalg.LinAlgError:
        raise SvdConvergenceError("SVD did not converge with gesdd or gesvd",
                                  residual=float(np.linalg.norm(a))) from None


def truncated_svd(a, max_rank: int, rel_tol: float = 0.0) -> SvdResult:
    """Keep the largest ``max_rank`` singular triplets of a matrix.

    Values with sigma_i <= rel_tol * sigma_1 are dropped as well, and so are
    values below the numerical-rank floor ``sigma_1 * max(M, N) * eps``.
    At least one triplet is always kept. Computation is in float64; each
    left singular vector is signed so its largest-magnitude entry is positive.
    """
    arr = as_array(a).astype(np.float64, copy=False)
    if arr.ndim != 2:
        raise ArgumentError(f"truncated_svd expects a matrix, got shape {arr.shape}")
    if int(max_rank) < 1:
        raise ArgumentError(f"max_rank must be >= 1, got {max_rank}")
    if rel_tol < 0:
        raise ArgumentError(f"rel_tol must be non-negative, got {rel_tol}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError("matrix contains non-finite values")

    u, s, vt = _full_svd(arr)
    floor = s[0] * max(arr.shape) * np.finfo(np.float64).eps if s.size else 0.0
    cut = max(rel_tol * s[0], floor) if s.size else 0.0
    r = max(1, min(int(max_rank), int(np.count_nonzero(s > cut)), s.size))

    u, vt = u[:, :r].copy(), vt[:r].copy()
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(r)] < 0, -1.0, 1.0)
    u *= signs
    vt *= signs[:, None]
    dropped = s[r:]
    return SvdResult(u, s[:r].copy(), vt, r, float(np.dot(dropped, dropped)))


def _factorizations(n: int, k: int, cap: int):
    """Non-increasing k-tuples of positive ints with product n and entries <= cap."""
    if k == 1:
        if n <= cap:
            yield (n,)
        return
    # largest factor must be at least the k-th root of n
    lo = max(1, math.ceil(round(n ** (1.0 / k), 9)))
    for f in range(min(cap, n), lo - 1, -1):
        if n % f == 0:
            for rest in _factorizations(n // f, k - 1, f):
                yield (f,) + rest


def balanced_factorization(n: int, k: int) -> tuple:
    """Split ``n`` into ``k`` factors with the smallest max-min spread.

    Ties go to the lexicographically smallest non-increasing tuple.
    """
    n, k = int(n), int(k)
    if n < 1 or k < 1:
        raise ArgumentError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    best = None
    for cand in _factorizations(n, k, n):
        key = (cand[0] - cand[-1], cand)
        if best is None or key < best:
            best = key
    return best[1]
