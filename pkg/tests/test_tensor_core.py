import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlapprox.errors import InvalidArgument
from dlapprox.tensor_core import (
    Scheme,
    Tensor4,
    explained_variation,
    flatten,
    svd,
    truncate,
    unflatten,
)

DIM = st.sampled_from([1, 2, 3, 5, 8])


def test_tensor4_pads_low_rank_shapes():
    assert Tensor4.from_array(np.ones((3, 2))).dims == (3, 2, 1, 1)
    assert Tensor4.from_array(np.ones(4)).dims == (4, 1, 1, 1)
    with pytest.raises(InvalidArgument):
        Tensor4((2, 2, 1, 1), np.ones(3))


@pytest.mark.parametrize("scheme, shape", [
    (Scheme.FILTER_WISE, (16, 72)),
    (Scheme.PROJECTION_FIRST, (144, 8)),
    (Scheme.SEPARABLE, (48, 24)),
])
def test_flatten_shapes(scheme, shape):
    w = np.zeros((16, 8, 3, 3), dtype=np.float32)
    v = flatten(w, scheme)
    assert (v.rows, v.cols) == shape


def test_per_channel_slice_shape():
    w = np.arange(16 * 8 * 9, dtype=np.float32).reshape(16, 8, 3, 3)
    v = flatten(w, Scheme.PER_CHANNEL_SLICE, channel=2)
    assert (v.rows, v.cols) == (16, 9)
    np.testing.assert_array_equal(v.matrix[5], w[5, 2].ravel())
    with pytest.raises(InvalidArgument):
        flatten(w, Scheme.PER_CHANNEL_SLICE, channel=8)


def test_separable_layout():
    w = np.random.default_rng(0).standard_normal((3, 2, 4, 5)).astype(np.float32)
    m = flatten(w, Scheme.SEPARABLE).matrix
    for o, i, y, x in [(0, 0, 0, 0), (2, 1, 3, 4), (1, 0, 2, 3)]:
        assert m[o * 4 + y, i * 5 + x] == w[o, i, y, x]


@pytest.mark.parametrize("scheme", [s for s in Scheme if s is not Scheme.PER_CHANNEL_SLICE])
def test_tiny_tensor_element_multiset(scheme):
    w = np.array([3.0, -1.0, 2.0, 0.5], dtype=np.float32).reshape(2, 2, 1, 1)
    m = flatten(w, scheme).matrix
    assert sorted(m.ravel().tolist()) == sorted(w.ravel().tolist())


@settings(max_examples=60, deadline=None)
@given(DIM, DIM, DIM, DIM, st.sampled_from(list(Scheme)), st.integers(0, 2**31 - 1))
def test_flatten_roundtrip_bit_identical(co, ci, kh, kw, scheme, seed):
    w = np.random.default_rng(seed).standard_normal((co, ci, kh, kw)).astype(np.float32)
    channel = seed % ci if scheme is Scheme.PER_CHANNEL_SLICE else None
    v = flatten(w, scheme, channel)
    assert v.rows * v.cols == (co * kh * kw if channel is not None else w.size)
    back = unflatten(v, base=w if channel is not None else None)
    assert back.tobytes() == w.tobytes()


def test_svd_identity_and_diagonal():
    np.testing.assert_array_equal(svd(np.eye(2)).sigma, [1, 1])
    np.testing.assert_array_equal(svd(np.diag([3.0, 4.0])).sigma, [4, 3])


def test_svd_reconstructs_random_matrix():
    a = np.random.default_rng(1).standard_normal((10, 7)).astype(np.float32)
    r = svd(a)
    rec = (r.u.astype(np.float64) * r.sigma) @ r.vt
    assert np.linalg.norm(rec - a) / np.linalg.norm(a) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_svd_properties(rows, cols, seed):
    a = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
    r = svd(a)
    assert np.all(np.diff(r.sigma) <= 0) and np.all(r.sigma >= 0)
    rec = (r.u.astype(np.float64) * r.sigma) @ r.vt
    assert np.linalg.norm(rec - a) <= 1e-5 * max(np.linalg.norm(a), 1e-30)
    k = r.rank_bound
    np.testing.assert_allclose(r.u.T.astype(np.float64) @ r.u, np.eye(k), atol=1e-6)
    np.testing.assert_allclose(r.vt.astype(np.float64) @ r.vt.T, np.eye(k), atol=1e-6)
    # deterministic, bit for bit
    r2 = svd(a)
    assert r.u.tobytes() == r2.u.tobytes() and r.vt.tobytes() == r2.vt.tobytes()
    # sign convention
    for j in range(k):
        col = r.u[:, j]
        nz = np.flatnonzero(col)
        assert nz.size == 0 or col[nz[0]] >= 0


def test_svd_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(InvalidArgument):
        svd(np.zeros((0, 3)))


def test_truncate_full_rank_and_dominant_direction():
    a = np.random.default_rng(2).standard_normal((6, 4)).astype(np.float32)
    left, right = truncate(svd(a), 4)
    assert np.linalg.norm(left.astype(np.float64) @ right - a) / np.linalg.norm(a) <= 1e-5
    left, right = truncate(svd(np.diag([4.0, 3.0])), 1)
    np.testing.assert_allclose(left @ right, np.diag([4.0, 0.0]), atol=1e-7)
    with pytest.raises(InvalidArgument):
        truncate(svd(a), 5)
    with pytest.raises(InvalidArgument):
        truncate(svd(a), 0)


def test_truncate_beats_random_rank2_factorizations():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((8, 6))
    left, right = truncate(svd(a), 2)
    best = np.linalg.norm(a - left.astype(np.float64) @ right)
    for _ in range(1000):
        x, y = rng.standard_normal((8, 2)), rng.standard_normal((2, 6))
        # least-squares optimal scale keeps the random oracle honest
        p = x @ y
        p *= np.sum(p * a) / np.sum(p * p)
        assert best <= np.linalg.norm(a - p) + 1e-9


def test_explained_variation_values():
    r = svd(np.diag([4.0, 3.0]))
    assert explained_variation(r, 1) == pytest.approx(0.64)
    assert explained_variation(r, 2) == 1.0
    assert explained_variation(svd(np.zeros((3, 3))), 1) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_explained_variation_monotone_and_tail_identity(rows, cols, seed):
    a = np.random.default_rng(seed).standard_normal((rows, cols))
    r = svd(a)
    vals = [explained_variation(r, b) for b in range(1, r.rank_bound + 1)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    for b in range(1, r.rank_bound + 1):
        left, right = truncate(r, b)
        err = np.linalg.norm(a - left.astype(np.float64) @ right)
        tail = np.sqrt(np.sum(r.sigma.astype(np.float64)[b:] ** 2))
        assert abs(err - tail) <= 1e-5 * max(tail, np.linalg.norm(a) * 1e-2)
