"""Matrix product operator factorization of weight matrices.

A weight matrix W (M x N) with M = m_1...m_k and N = n_1...n_k is reshaped
to (m_1..m_k, n_1..n_k), interleaved to (m_1, n_1, ..., m_k, n_k) and split
by a left-to-right sweep of truncated SVDs. Core i has axes
(left_bond, m_i, n_i, right_bond).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArgumentError
from .tensor import DType, as_array, balanced_factorization, truncated_svd


@dataclass(frozen=True)
class IndexScheme:
    row_factors: tuple
    col_factors: tuple

    def __post_init__(self):
        rows = tuple(int(f) for f in self.row_factors)
        cols = tuple(int(f) for f in self.col_factors)
        if len(rows) != len(cols) or not rows:
            raise ArgumentError(f"row/col factor lists must have equal non-zero length, "
                                f"got {rows} and {cols}")
        if any(f < 1 for f in rows + cols):
            raise ArgumentError("factors must be positive")
        object.__setattr__(self, "row_factors", rows)
        object.__setattr__(self, "col_factors", cols)

    @classmethod
    def auto(cls, shape: Sequence[int], k: int) -> "IndexScheme":
        m, n = shape
        return cls(balanced_factorization(m, k), balanced_factorization(n, k))

    @property
    def k(self) -> int:
        return len(self.row_factors)

    @property
    def shape(self) -> tuple:
        return math.prod(self.row_factors), math.prod(self.col_factors)

    def saturating_bonds(self) -> tuple:
        """Largest bond each of the k-1 cuts can carry (full rank at that cut)."""
        phys = [m * n for m, n in zip(self.row_factors, self.col_factors)]
        return tuple(min(math.prod(phys[:i + 1]), math.prod(phys[i + 1:]))
                     for i in range(self.k - 1))

    def full_bond(self) -> int:
        """Smallest uniform cap that makes decomposition exact."""
        return max(self.saturating_bonds(), default=1)

    def estimate_params(self, max_bond) -> int:
        """Parameter count when every bond reaches min(cap, saturating bond)."""
        caps = _bond_caps(max_bond, self.k)
        bonds = [1] + [min(c, s) for c, s in zip(caps, self.saturating_bonds())] + [1]
        return sum(bonds[i] * m * n * bonds[i + 1]
                   for i, (m, n) in enumerate(zip(self.row_factors, self.col_factors)))


@dataclass
class MpoLayer:
    cores: list
    scheme: IndexScheme
    max_bond: object
    original_shape: tuple
    truncation_error: float = 0.0
    dtype: DType = DType.F64
    bond_dims: tuple = field(init=False)

    def __post_init__(self):
        self.dtype = DType.parse(self.dtype)
        self.original_shape = tuple(int(s) for s in self.original_shape)
        if len(self.cores) != self.scheme.k:
            raise ArgumentError(f"{len(self.cores)} cores for a {self.scheme.k}-core scheme")
        if self.scheme.shape != self.original_shape:
            raise ArgumentError(f"scheme shape {self.scheme.shape} != {self.original_shape}")
        left = 1
        for i, (core, m, n) in enumerate(zip(self.cores, self.scheme.row_factors,
                                              self.scheme.col_factors)):
            if core.ndim != 4 or core.shape[:3] != (left, m, n):
                raise ArgumentError(f"core {i} has shape {core.shape}, expected ({left}, {m}, {n}, *)")
            left = core.shape[3]
        if left != 1:
            raise ArgumentError("right boundary bond must be 1")
        self.bond_dims = tuple(c.shape[3] for c in self.cores[:-1])

    @property
    def k(self) -> int:
        return self.scheme.k


def _bond_caps(max_bond, k: int) -> tuple:
    if np.isscalar(max_bond):
        caps = (int(max_bond),) * (k - 1)
    else:
        caps = tuple(int(c) for c in max_bond)
        if len(caps) != k - 1:
            raise ArgumentError(f"per-bond caps need {k - 1} entries, got {len(caps)}")
    if any(c < 1 for c in caps):
        raise ArgumentError(f"bond dimension caps must be >= 1, got {max_bond}")
    return caps


def _store_dtype(arr: np.ndarray, dtype):
    if dtype is not None:
        return DType.parse(dtype)
    return {np.dtype(np.float32): DType.F32, np.dtype(np.float16): DType.F32}.get(arr.dtype, DType.F64)


_FLOATS = {DType.F64: np.float64, DType.F32: np.float32, DType.F16: np.float16}


def decompose(w, scheme: IndexScheme, max_bond, rel_tol: float = 0.0, dtype=None) -> MpoLayer:
    """TT-SVD sweep of a weight matrix into an MPO.

    ``max_bond`` is a uniform cap or a sequence of k-1 per-bond caps. Cores are
    computed in float64 and stored in ``dtype`` (default: the input's float
    precision, float16 inputs stored as float32).
    """
    arr = as_array(w, widen=False)
    if arr.ndim != 2:
        raise ArgumentError(f"decompose expects a matrix, got shape {arr.shape}")
    if arr.shape != scheme.shape:
        raise ArgumentError(f"matrix shape {arr.shape} does not match scheme {scheme.shape}")
    store = _store_dtype(arr, dtype)
    if store not in _FLOATS:
        raise ArgumentError(f"cores must be stored as a float dtype, got {store.value}")
    k = scheme.k
    caps = _bond_caps(max_bond, k) if k > 1 else ()
    a = arr.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ArgumentError("weight matrix contains non-finite values")

    rows, cols = scheme.row_factors, scheme.col_factors
    interleave = [ax for i in range(k) for ax in (i, k + i)]
    rest = a.reshape(rows + cols).transpose(interleave)

    cores, discarded, left = [], 0.0, 1
    for i in range(k - 1):
        mat = rest.reshape(left * rows[i] * cols[i], -1)
        svd = truncated_svd(mat, caps[i], rel_tol)
        r = svd.rank_kept
        cores.append(svd.u.reshape(left, rows[i], cols[i], r))
        rest = svd.singular_values[:, None] * svd.vt
        discarded += svd.discarded_weight
        left = r
    cores.append(rest.reshape(left, rows[-1], cols[-1], 1))

    np_dtype = _FLOATS[store]
    cores = [np.ascontiguousarray(c, dtype=np_dtype) for c in cores]
    return MpoLayer(cores, scheme, max_bond, arr.shape, float(np.sqrt(discarded)), store)


def reconstruct(layer: MpoLayer, dtype=None) -> np.ndarray:
    """Contract all cores back into the dense (M, N) matrix.

    Contraction runs in float64; the result is float64 for float64 layers and
    float32 otherwise, unless ``dtype`` is given.
    """
    k = layer.k
    acc = np.ones((1, 1))  # dummy left boundary, then the first bond
    for core in layer.cores:
        c = core.astype(np.float64)
        acc = np.tensordot(acc, c, axes=([acc.ndim - 1], [0]))
    # acc axes: (1, m_1, n_1, ..., m_k, n_k, 1)
    acc = acc.reshape(acc.shape[1:-1])
    order = [2 * i for i in range(k)] + [2 * i + 1 for i in range(k)]
    dense = acc.transpose(order).reshape(layer.original_shape)
    if dtype is None:
        dtype = np.float64 if layer.dtype is DType.F64 else np.float32
    return dense.astype(dtype, copy=False)


def param_count(layer: MpoLayer) -> int:
    return int(sum(c.size for c in layer.cores))


def _apply_steps(layer: MpoLayer, x: np.ndarray):
    """Forward contraction, returning the output and each step's input state."""
    rows, cols = layer.scheme.row_factors, layer.scheme.col_factors
    n, b = x.shape
    states = []
    state = x.reshape(1, 1, cols[0], -1)  # (done rows P, bond a, n_i, remaining R)
    for i, core in enumerate(layer.cores):
        states.append(state)
        # (P, a, n, R) x (a, m, n, b) -> (P, m, b, R)
        out = np.einsum("panr,amnb->pmbr", state, core, optimize=True)
        p, m, bond, r = out.shape
        if i + 1 < len(layer.cores):
            state = out.reshape(p * m, bond, cols[i + 1], r // cols[i + 1])
        else:
            state = out
    return state.reshape(math.prod(rows), b), states


def _compute_dtype(layer: MpoLayer, x: np.ndarray):
    return np.result_type(np.float32, x.dtype, *(c.dtype for c in layer.cores))


def apply(layer: MpoLayer, x) -> np.ndarray:
    """Matrix-free product reconstruct(layer) @ x for x of shape (N, B)."""
    arr = as_array(x)
    if arr.ndim == 1:
        raise ArgumentError("apply expects x of shape (N, B); reshape vectors to (N, 1)")
    if arr.ndim != 2 or arr.shape[0] != layer.original_shape[1]:
        raise ArgumentError(f"x has shape {arr.shape}, layer expects ({layer.original_shape[1]}, B)")
    dt = _compute_dtype(layer, arr)
    view = MpoLayer([c.astype(dt, copy=False) for c in layer.cores], layer.scheme,
                    layer.max_bond, layer.original_shape, layer.truncation_error, layer.dtype)
    out, _ = _apply_steps(view, arr.astype(dt, copy=False))
    return out


def apply_with_cache(layer: MpoLayer, x: np.ndarray):
    """Like ``apply`` but also returns the cache needed by ``apply_backward``."""
    out, states = _apply_steps(layer, x)
    return out, states


def apply_backward(layer: MpoLayer, states, grad_out: np.ndarray):
    """Vector-Jacobian product of ``apply``.

    Returns (list of core gradients, gradient w.r.t. x), contracting the
    upstream gradient with cached states and the other cores only.
    """
    rows, cols = layer.scheme.row_factors, layer.scheme.col_factors
    k = layer.k
    grads = [None] * k
    b = grad_out.shape[1]
    # gradient of the final (P, m, 1, R) step output
    p_done = math.prod(rows[:-1])
    d_out = grad_out.reshape(p_done, rows[-1], 1, b)
    for i in range(k - 1, -1, -1):
        state, core = states[i], layer.cores[i]
        grads[i] = np.einsum("panr,pmbr->amnb", state, d_out, optimize=True)
        d_state = np.einsum("pmbr,amnb->panr", d_out, core, optimize=True)
        if i > 0:
            # undo the reshape (P*m_prev... ) that produced this state
            p_prev = math.prod(rows[:i - 1])
            bond = state.shape[1]
            r_prev = d_state.shape[2] * d_state.shape[3]
            d_out = d_state.reshape(p_prev, rows[i - 1], bond, r_prev)
        else:
            grad_x = d_state.reshape(math.prod(cols), b)
    return grads, grad_x


def is_left_canonical(layer: MpoLayer, atol: float = 1e-6) -> bool:
    for core in layer.cores[:-1]:
        mat = core.astype(np.float64).reshape(-1, core.shape[3])
        if not np.allclose(mat.T @ mat, np.eye(mat.shape[1]), atol=atol):
            return False
    return True
