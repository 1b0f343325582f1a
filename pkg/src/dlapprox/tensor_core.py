"""Dense weight tensors, matrix flattenings and a deterministic SVD.

All weight tensors are float32 numpy arrays laid out as
``(c_o, c_i, k_h, k_w)``.  Rank-2 and rank-1 tensors are padded with
trailing unit dimensions when a 4-D view is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidArgument, NumericError


@dataclass(frozen=True)
class Tensor4:
    """Row-major float32 tensor with exactly four dimensions."""

    dims: tuple[int, int, int, int]
    data: np.ndarray

    def __post_init__(self):
        if len(self.dims) != 4 or any(d < 0 for d in self.dims):
            raise InvalidArgument(f"bad tensor dims {self.dims}")
        flat = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if flat.size != int(np.prod(self.dims)):
            raise InvalidArgument(f"data length {flat.size} does not match dims {self.dims}")
        object.__setattr__(self, "data", flat)

    @classmethod
    def from_array(cls, arr) -> "Tensor4":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(as_dims4(arr.shape), arr)

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def as_dims4(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= 4:
        raise InvalidArgument(f"cannot view shape {shape} as a 4-D tensor")
    return shape + (1,) * (4 - len(shape))


def as_4d(w) -> np.ndarray:
    if isinstance(w, Tensor4):
        return w.array
    w = np.asarray(w)
    return w.reshape(as_dims4(w.shape))


class Scheme(str, Enum):
    FILTER_WISE = "FilterWise"
    PROJECTION_FIRST = "ProjectionFirst"
    SEPARABLE = "Separable"
    PER_CHANNEL_SLICE = "PerChannelSlice"


@dataclass(frozen=True)
class MatrixView:
    matrix: np.ndarray
    scheme: Scheme
    dims: tuple[int, int, int, int]
    channel: int | None = None

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


def flatten(w, scheme: Scheme | str, channel: int | None = None) -> MatrixView:
    """Flatten a ``(c_o, c_i, k_h, k_w)`` tensor into a matrix.

    ``FilterWise``       -> ``c_o x (c_i k_h k_w)``
    ``ProjectionFirst``  -> ``(c_o k_h k_w) x c_i``
    ``Separable``        -> ``(c_o k_h) x (c_i k_w)``, ``M[o*k_h + y, i*k_w + x] = W[o, i, y, x]``
    ``PerChannelSlice``  -> ``c_o x (k_h k_w)`` taken from ``W[:, channel]``
    """
    scheme = Scheme(scheme)
    w = as_4d(w)
    co, ci, kh, kw = w.shape
    if scheme is Scheme.FILTER_WISE:
        m = w.reshape(co, ci * kh * kw)
    elif scheme is Scheme.PROJECTION_FIRST:
        m = w.transpose(0, 2, 3, 1).reshape(co * kh * kw, ci)
    elif scheme is Scheme.SEPARABLE:
        m = w.transpose(0, 2, 1, 3).reshape(co * kh, ci * kw)
    else:
        if channel is None or not 0 <= channel < ci:
            raise InvalidArgument(f"per-channel slice index {channel} out of range for c_i={ci}")
        m = w[:, channel].reshape(co, kh * kw)
    return MatrixView(np.ascontiguousarray(m), scheme, (co, ci, kh, kw), channel)


def unflatten(view: MatrixView, base=None) -> np.ndarray:
    """Inverse of :func:`flatten`.

    A per-channel slice only covers one input channel, so it is written
    into a copy of ``base`` (zeros when omitted).
    """
    co, ci, kh, kw = view.dims
    m = view.matrix
    if view.scheme is Scheme.FILTER_WISE:
        return m.reshape(co, ci, kh, kw).copy()
    if view.scheme is Scheme.PROJECTION_FIRST:
        return m.reshape(co, kh, kw, ci).transpose(0, 3, 1, 2).copy()
    if view.scheme is Scheme.SEPARABLE:
        return m.reshape(co, kh, ci, kw).transpose(0, 2, 1, 3).copy()
    out = np.zeros(view.dims, dtype=m.dtype) if base is None else np.array(base, copy=True)
    out[:, view.channel] = m.reshape(co, kh, kw)
    return out


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    # squared singular values in float64, used for energy fractions
    energy: np.ndarray = field(repr=False)

    @property
    def rank_bound(self) -> int:
        return self.sigma.shape[0]

    @property
    def degenerate(self) -> bool:
        """True for an all-zero input (no singular value mass)."""
        return not np.any(self.energy > 0)


def svd(m) -> SvdResult:
    if isinstance(m, MatrixView):
        m = m.matrix
    a = np.asarray(m)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidArgument(f"svd needs a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("svd input contains non-finite values")
    a64 = a.astype(np.float64)
    try:
        u, s, vt = np.linalg.svd(a64, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed to converge: {exc}", a.shape) from exc
    # make the first nonzero entry of every u column non-negative
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j] = -vt[j]
    s = np.maximum(s, 0.0)
    return SvdResult(
        u=u.astype(np.float32),
        sigma=s.astype(np.float32),
        vt=vt.astype(np.float32),
        energy=s * s,
    )


def _check_rank(r: SvdResult, b: int) -> None:
    if not isinstance(b, (int, np.integer)) or not 1 <= b <= r.rank_bound:
        raise InvalidArgument(f"rank {b} outside [1, {r.rank_bound}]")


def truncate(r: SvdResult, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(U'S', V^T')`` for the leading ``b`` singular triplets."""
    _check_rank(r, b)
    left = (r.u[:, :b].astype(np.float64) * r.sigma[:b].astype(np.float64)).astype(np.float32)
    right = np.ascontiguousarray(r.vt[:b])
    return left, right


def explained_variation(r: SvdResult, b: int) -> float:
    """Fraction of squared singular-value mass kept by the first ``b`` values."""
    _check_rank(r, b)
    total = float(r.energy.sum())
    if total <= 0.0 or b == r.rank_bound:
        return 1.0
    return min(1.0, float(r.energy[:b].sum()) / total)
