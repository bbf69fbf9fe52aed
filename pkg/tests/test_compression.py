import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shredkit.compression import (
    IncrementalSVDState, LatentSeries, SVDBasis, compress_dataset, decode, decode_latent,
    dense_svd, encode, encode_case, energy_content, fix_signs, hierarchical_svd,
    incremental_svd, incremental_svd_update, randomized_svd, read_basis_file,
    reference_extrema, rescale, rescale_field, select_rank, stack_cases, unscale_field,
    write_basis_file,
)
from shredkit.core import FieldId, Grid2D, ParametricCase, ParametricDataset, Split


def graded(m, n, decay=0.7, seed=0):
    """Random matrix with singular values decay**k."""
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.normal(size=(m, min(m, n))))
    V, _ = np.linalg.qr(rng.normal(size=(n, min(m, n))))
    s = decay ** np.arange(min(m, n))
    return (U * s) @ V.T


def gapped(m, n, r, gap=10.0, seed=0):
    """Matrix whose leading r singular values are well separated and sit a
    factor ``gap`` above the tail."""
    rng = np.random.default_rng(seed)
    k = min(m, n)
    U, _ = np.linalg.qr(rng.normal(size=(m, k)))
    V, _ = np.linalg.qr(rng.normal(size=(n, k)))
    s = np.concatenate([gap * 2.0 ** -np.arange(r) * 2 ** r, 0.5 * 0.9 ** np.arange(k - r)])
    s = np.sort(s)[::-1]
    return (U * s) @ V.T


def tiny_dataset(seed=0, n_h=6, n_t=4):
    rng = np.random.default_rng(seed)
    cases = [ParametricCase(tau=float(t), dt=0.05,
                            fields={FieldId.FLUX: rng.uniform(1, 2, (n_h, n_t)),
                                    FieldId.TEMPERATURE: rng.uniform(900, 950, (n_h, n_t))})
             for t in (1.0, 2.0, 3.0, 4.0)]
    return ParametricDataset(Grid2D(2, n_h // 2), cases,
                             [Split.TRAIN, Split.VALIDATION, Split.TRAIN, Split.TEST])


# ---- rescaling and stacking

def test_rescale_examples():
    assert rescale(1050.0, 900.0, 1200.0) == pytest.approx(0.5)
    assert rescale(900.0, 900.0, 1200.0) == 0.0
    assert rescale(1200.0, 900.0, 1200.0) == 1.0
    with pytest.raises(ValueError, match="constant reference field"):
        rescale(1.0, 2.0, 2.0)


def test_unscale_round_trip():
    x = np.random.default_rng(0).uniform(800, 1300, (10, 7))
    np.testing.assert_allclose(unscale_field(rescale(x, 900, 1200), 900, 1200), x, rtol=1e-12)
    assert unscale_field(0.0, 900, 1200) == 900 and unscale_field(1.0, 900, 1200) == 1200


def test_reference_is_train_t0():
    ds = tiny_dataset()
    lo, hi = reference_extrema(ds, FieldId.FLUX)
    col = np.concatenate([c.fields[FieldId.FLUX][:, 0] for c in ds.cases_in(Split.TRAIN)])
    assert (lo, hi) == (col.min(), col.max())


def test_stack_shape_and_indexing():
    ds = tiny_dataset()
    lo, hi = reference_extrema(ds, FieldId.FLUX)
    X = stack_cases(ds, FieldId.FLUX, Split.TRAIN)
    assert X.shape == (6, 8)
    case1 = ds.cases_in(Split.TRAIN)[1]
    np.testing.assert_array_equal(X[:, 1 * 4 + 2], rescale(case1.fields[FieldId.FLUX][:, 2], lo, hi))
    single = stack_cases(ds, FieldId.FLUX, Split.TEST)
    np.testing.assert_array_equal(single, rescale_field(ds.cases_in(Split.TEST)[0], FieldId.FLUX, lo, hi))


# ---- randomized SVD

def test_rsvd_diagonal():
    X = np.zeros((6, 5))
    X[0, 0], X[1, 1], X[2, 2] = 3, 2, 1
    basis, _ = randomized_svd(X, 2, oversample=2)
    np.testing.assert_allclose(basis.sigma, [3, 2], atol=1e-10)


def test_rsvd_exact_rank():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(80, 5)) @ rng.normal(size=(5, 60)).T.T
    basis, coeffs = randomized_svd(X, 5)
    assert np.linalg.norm(X - basis.U @ coeffs) < 1e-8 * np.linalg.norm(X)


def test_rsvd_near_optimal_on_random_matrix():
    X = np.random.default_rng(2).normal(size=(200, 150))
    basis, coeffs = randomized_svd(X, 20)
    s = np.linalg.svd(X, compute_uv=False)
    opt = np.sqrt(np.sum(s[20:] ** 2))
    assert np.linalg.norm(X - basis.U @ coeffs) <= 1.05 * opt


def test_rsvd_rank_too_large():
    with pytest.raises(ValueError):
        randomized_svd(np.ones((4, 3)), 4)


def test_rsvd_deterministic():
    X = graded(50, 40)
    a, _ = randomized_svd(X, 5, seed=3)
    b, _ = randomized_svd(X, 5, seed=3)
    np.testing.assert_array_equal(a.U, b.U)


# ---- incremental SVD

def test_incremental_first_column():
    v = np.array([3.0, 4.0, 0.0])
    state = incremental_svd_update(IncrementalSVDState(3, 2), v)
    np.testing.assert_allclose(state.s, [5.0])
    np.testing.assert_allclose(np.abs(state.U[:, 0]), np.abs(v) / 5.0)


def test_incremental_in_span_column():
    # a column inside the current span adds no new direction: the mode count and
    # the spanned subspace stay the same, and sigma equals the dense oracle of
    # the augmented matrix
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 4)) @ rng.normal(size=(4, 12))
    state = IncrementalSVDState(40, 8)
    incremental_svd_update(state, X)
    U_before, k_before = state.U.copy(), state.s.size
    col = U_before @ rng.normal(size=k_before)
    incremental_svd_update(state, col)
    assert state.s.size == k_before
    P0, P1 = U_before @ U_before.T, state.U @ state.U.T
    assert np.linalg.norm(P1 - P0) < 1e-10
    oracle = np.linalg.svd(np.column_stack([X, col]), compute_uv=False)[:k_before]
    np.testing.assert_allclose(state.s, oracle, rtol=1e-10)


def test_incremental_matches_one_shot():
    X = graded(60, 45, decay=0.3, seed=4)
    r = 6
    basis, _ = incremental_svd(X, r, r_max=20, batch=1)
    dense = np.linalg.svd(X, compute_uv=False)[:r]
    np.testing.assert_allclose(basis.sigma, dense, rtol=1e-6)


def test_incremental_dimension_mismatch():
    with pytest.raises(ValueError):
        incremental_svd_update(IncrementalSVDState(5, 2), np.ones((4, 1)))


def test_incremental_stays_orthonormal():
    X = graded(30, 120, decay=0.9, seed=5)
    basis, _ = incremental_svd(X, 10, r_max=10)
    assert np.linalg.norm(basis.U.T @ basis.U - np.eye(10)) < 1e-10


# ---- hierarchical SVD

def test_hierarchical_single_block():
    X = graded(40, 30, seed=6)
    h, _ = hierarchical_svd([X], 5)
    d, _ = dense_svd(X, 5)
    np.testing.assert_allclose(h.sigma, d.sigma, rtol=1e-12)
    np.testing.assert_allclose(h.U, d.U, atol=1e-10)


def test_hierarchical_duplicate_blocks():
    rng = np.random.default_rng(7)
    B = rng.normal(size=(30, 4)) @ rng.normal(size=(4, 10))
    h, _ = hierarchical_svd([B, B], 4)
    oracle = np.linalg.svd(np.hstack([B, B]), compute_uv=False)[:4]
    np.testing.assert_allclose(h.sigma, oracle, rtol=1e-10)
    np.testing.assert_allclose(h.sigma, np.sqrt(2) * np.linalg.svd(B, compute_uv=False)[:4], rtol=1e-10)


def test_hierarchical_four_blocks():
    X = gapped(300, 240, 15, seed=8)
    h, _ = hierarchical_svd(np.hsplit(X, 4), 15)
    dense = np.linalg.svd(X, compute_uv=False)[:15]
    np.testing.assert_allclose(h.sigma, dense, rtol=1e-3)


def test_hierarchical_mismatched_blocks():
    with pytest.raises(ValueError):
        hierarchical_svd([np.ones((4, 2)), np.ones((5, 2))], 1)


# ---- energy and rank

def test_energy_examples():
    assert energy_content([2, 0, 0], 1) == 0.0
    assert energy_content([1, 1], 1) == 0.5
    assert energy_content([3, 2, 1], 2) == pytest.approx(1 / 14, rel=1e-12)
    with pytest.raises(ValueError, match="zero-energy"):
        energy_content([0, 0], 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=20).filter(lambda s: sum(s) > 1e-3))
def test_energy_non_increasing(sigma):
    sigma = sorted(sigma, reverse=True)
    vals = [energy_content(sigma, r) for r in range(1, len(sigma) + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_select_rank_examples():
    assert select_rank([2, 0, 0], 0.01) == 1
    sigma = 2.0 ** -np.arange(1, 30)
    brute = next(r for r in range(1, 30) if energy_content(sigma, r) <= 0.01)
    assert select_rank(sigma, 0.01, r_cap=100) == brute
    flat = np.ones(50)
    assert select_rank(flat, 0.01, 10) == 10


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-3, 10), min_size=1, max_size=40))
def test_select_rank_capped(sigma):
    assert 1 <= select_rank(sorted(sigma, reverse=True), 0.01, 10) <= 10


# ---- sign convention

def test_fix_signs_idempotent_and_preserving():
    X = graded(30, 20, seed=9)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    basis, C = fix_signs(SVDBasis(U[:, :5], s[:5]), s[:5, None] * Vt[:5])
    np.testing.assert_allclose(basis.U @ C, U[:, :5] @ (s[:5, None] * Vt[:5]), atol=1e-13)
    again, C2 = fix_signs(basis, C)
    np.testing.assert_array_equal(again.U, basis.U)
    np.testing.assert_array_equal(C2, C)
    U3 = basis.U.copy()
    U3[:, 3] *= -1
    back, _ = fix_signs(SVDBasis(U3, basis.sigma))
    np.testing.assert_array_equal(back.U, basis.U)


def test_rsvd_and_hierarchical_modes_agree():
    X = gapped(120, 90, 6, seed=10)
    a, _ = randomized_svd(X, 6)
    b, _ = hierarchical_svd(np.hsplit(X, 3), 6)
    inner = np.abs(np.sum(a.U * b.U, axis=0))
    assert np.all(inner > 0.999)
    # canonical signs make the raw inner products positive as well
    assert np.all(np.sum(a.U * b.U, axis=0) > 0.999)


def test_three_algorithms_agree_on_gapped_spectrum():
    X = gapped(150, 100, 5, seed=11)
    s_r, _ = randomized_svd(X, 5)
    s_i, _ = incremental_svd(X, 5, r_max=30)
    s_h, _ = hierarchical_svd(np.hsplit(X, 4), 5)
    for other in (s_i, s_h):
        np.testing.assert_allclose(other.sigma, s_r.sigma, rtol=1e-3)


# ---- encode / decode

def test_encode_basis_gives_identity():
    basis, _ = dense_svd(graded(20, 15, seed=12), 4)
    np.testing.assert_allclose(encode(basis, basis.U), np.eye(4), atol=1e-13)


def test_encode_decode_span_and_tail():
    X = graded(40, 30, decay=0.8, seed=13)
    basis, _ = dense_svd(X, 6)
    Y = basis.U @ np.random.default_rng(0).normal(size=(6, 5))
    np.testing.assert_allclose(decode(basis, encode(basis, Y), physical=False), Y, atol=1e-10)
    resid = np.linalg.norm(X - decode(basis, encode(basis, X), physical=False)) ** 2
    s = np.linalg.svd(X, compute_uv=False)
    assert abs(resid - np.sum(s[6:] ** 2)) < 1e-8


def test_decode_physical_units():
    basis = SVDBasis(np.eye(3)[:, :2], [2.0, 1.0], FieldId.TEMPERATURE, 900.0, 1200.0)
    np.testing.assert_allclose(decode(basis, np.zeros((2, 3))), 900.0)
    X = unscale_field(basis.U @ np.array([[0.2], [0.7]]), 900.0, 1200.0)
    np.testing.assert_allclose(decode(basis, encode(basis, X, physical=True)), X, rtol=1e-10)


def test_dimension_mismatch():
    basis = SVDBasis(np.eye(3)[:, :2], [2.0, 1.0])
    with pytest.raises(ValueError):
        encode(basis, np.ones((4, 2)))
    with pytest.raises(ValueError):
        decode(basis, np.ones((3, 2)))


def test_training_reconstruction_bound():
    ds = tiny_dataset(seed=3, n_h=40, n_t=12)
    bases = compress_dataset(ds, "dense", energy_tol=0.05, r_cap=10)
    for fid, b in bases.items():
        X = stack_cases(ds, fid, Split.TRAIN)
        rel = np.linalg.norm(X - b.U @ (b.U.T @ X)) / np.linalg.norm(X)
        total = np.sum(X * X)
        tail = 1 - np.sum(b.sigma ** 2) / total
        assert rel <= np.sqrt(tail) + 1e-8


def test_latent_round_trip_and_offsets():
    ds = tiny_dataset(seed=4, n_h=40, n_t=12)
    bases = compress_dataset(ds, "randomized", energy_tol=1e-12, r_cap=40)
    case = ds.cases[0]
    lat = encode_case(bases, case)
    assert lat.r_total == sum(b.rank for b in bases.values())
    rec = decode_latent(bases, lat)
    for fid in bases:
        np.testing.assert_allclose(rec[fid], case.fields[fid], rtol=1e-8)
    with pytest.raises(ValueError):
        LatentSeries(np.zeros((3, 2)), {FieldId.FLUX: (0, 2)})


@pytest.mark.parametrize("method", ["randomized", "incremental", "hierarchical", "dense"])
def test_compress_methods_agree(method):
    ds = tiny_dataset(seed=5, n_h=40, n_t=12)
    ref = compress_dataset(ds, "dense", energy_tol=0.01)
    got = compress_dataset(ds, method, energy_tol=0.01)
    for fid in ref:
        assert got[fid].rank == ref[fid].rank
        np.testing.assert_allclose(got[fid].sigma, ref[fid].sigma, rtol=1e-3)


def test_basis_file_round_trip(tmp_path):
    basis, _ = dense_svd(graded(20, 10, seed=14), 3)
    basis = SVDBasis(basis.U, basis.sigma, FieldId.FLUX, 0.5, 2.5)
    write_basis_file(basis, tmp_path / "b.base")
    assert (tmp_path / "b.base").read_bytes()[:8] == b"SHRDBASE"
    back = read_basis_file(tmp_path / "b.base")
    np.testing.assert_array_equal(back.U, basis.U)
    np.testing.assert_array_equal(back.sigma, basis.sigma)
    assert (back.field, back.ref_min, back.ref_max) == (FieldId.FLUX, 0.5, 2.5)
