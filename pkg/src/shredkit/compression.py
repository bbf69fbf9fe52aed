"""Snapshot rescaling, parametric stacking and low-rank SVD compression.

Three factorisations are provided: randomized (range finder with power
iterations), incremental (column-streaming updates of a rank-capped
factorisation) and hierarchical (per-block SVDs merged pairwise).  All of
them return bases in a canonical sign convention so outputs of different
algorithms can be compared mode by mode.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (FieldId, ParametricCase, ParametricDataset, Split, _pack_string,
                   atomic_write_bytes, read_header)


@dataclass(frozen=True, eq=False)
class SVDBasis:
    U: np.ndarray
    sigma: np.ndarray
    field: FieldId | None = None
    ref_min: float = 0.0
    ref_max: float = 1.0

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        s = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if U.ndim != 2 or U.shape[1] != s.size or s.size < 1:
            raise ValueError("U must be N_h x r with r == len(sigma) >= 1")
        if np.any(s < 0) or np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)):
            raise ValueError("singular values must be non-negative and non-increasing")
        if not self.ref_max > self.ref_min:
            raise ValueError("constant reference field")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "sigma", s)
        if self.field is not None:
            object.__setattr__(self, "field", FieldId(self.field))

    @property
    def rank(self) -> int:
        return self.sigma.size

    @property
    def n_h(self) -> int:
        return self.U.shape[0]

    def truncated(self, r: int) -> "SVDBasis":
        return SVDBasis(self.U[:, :r], self.sigma[:r], self.field, self.ref_min, self.ref_max)


@dataclass(frozen=True, eq=False)
class LatentSeries:
    """Concatenated per-field latent coefficients for one case."""

    coeffs: np.ndarray
    offsets: dict
    tau: float | None = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("coefficients must be r_total x N_t")
        spans = sorted(self.offsets.values())
        pos = 0
        for start, length in spans:
            if start != pos or length < 1:
                raise ValueError("field offsets must partition [0, r_total)")
            pos += length
        if pos != c.shape[0]:
            raise ValueError("field offsets must partition [0, r_total)")
        object.__setattr__(self, "coeffs", c)

    @property
    def r_total(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_t(self) -> int:
        return self.coeffs.shape[1]

    def block(self, fid: FieldId) -> np.ndarray:
        start, length = self.offsets[FieldId(fid)]
        return self.coeffs[start:start + length]


# ---------------------------------------------------------------------------
# rescaling and stacking

def rescale(x, ref_min: float, ref_max: float) -> np.ndarray:
    if ref_max == ref_min:
        raise ValueError("constant reference field")
    if not ref_max > ref_min:
        raise ValueError("ref_max must exceed ref_min")
    return (np.asarray(x, dtype=np.float64) - ref_min) / (ref_max - ref_min)


def rescale_field(case: ParametricCase, field: FieldId, ref_min: float, ref_max: float) -> np.ndarray:
    """Min-max rescaling of one field against reference extrema."""
    return rescale(case.fields[FieldId(field)], ref_min, ref_max)


def unscale_field(matrix, ref_min: float, ref_max: float) -> np.ndarray:
    return ref_min + np.asarray(matrix, dtype=np.float64) * (ref_max - ref_min)


def reference_extrema(dataset: ParametricDataset, field: FieldId) -> tuple[float, float]:
    """Min and max of the t = 0 column over the TRAIN cases."""
    cols = [c.fields[FieldId(field)][:, 0] for c in dataset.cases_in(Split.TRAIN)]
    if not cols:
        raise ValueError("no TRAIN cases to take reference extrema from")
    col = np.concatenate(cols)
    lo, hi = float(col.min()), float(col.max())
    if hi == lo:
        raise ValueError(f"constant reference field ({FieldId(field).value} at t=0)")
    return lo, hi


def stack_cases(dataset: ParametricDataset, field: FieldId, which_split: Split,
                ref: tuple[float, float] | None = None) -> np.ndarray:
    """Rescaled snapshots of a split side by side; column ``p*N_t + j`` is case
    ``p`` (tau order) at time ``j``."""
    cases = dataset.cases_in(which_split)
    if not cases:
        raise ValueError(f"split {Split(which_split).value} is empty")
    lo, hi = ref if ref is not None else reference_extrema(dataset, field)
    return np.hstack([rescale_field(c, field, lo, hi) for c in cases])


# ---------------------------------------------------------------------------
# factorisations

def fix_signs(basis: SVDBasis, coeffs: np.ndarray | None = None):
    """Make the largest-magnitude entry of every mode positive.

    The matching coefficient rows are negated with their modes, so the
    product ``U @ coeffs`` is unchanged.
    """
    U = basis.U.copy()
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1
    out = SVDBasis(U, basis.sigma, basis.field, basis.ref_min, basis.ref_max)
    if coeffs is None:
        return out, None
    C = np.array(coeffs, dtype=np.float64)
    C[flip] *= -1
    return out, C


def _finish(U, s, Vt):
    basis, coeffs = fix_signs(SVDBasis(U, s), s[:, None] * Vt)
    return basis, coeffs


def dense_svd(X: np.ndarray, r: int):
    """Truncated SVD from LAPACK; the reference all other routines are checked against."""
    X = np.asarray(X, dtype=np.float64)
    if r < 1 or r > min(X.shape):
        raise ValueError(f"rank {r} too large for a {X.shape[0]}x{X.shape[1]} matrix")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return _finish(U[:, :r], s[:r], Vt[:r])


def randomized_svd(X: np.ndarray, r: int, oversample: int = 10, power_iters: int = 2,
                   seed=0):
    """Rank-``r`` randomized SVD.

    Returns ``(basis, coeffs)`` with ``coeffs = U.T @ X`` (equivalently
    ``diag(sigma) @ Vt``).  The sketch width is clipped to the smaller matrix
    dimension when ``r + oversample`` would exceed it.
    """
    X = np.asarray(X, dtype=np.float64)
    m, n = X.shape
    if r < 1 or r > min(m, n):
        raise ValueError(f"rank {r} too large for a {m}x{n} matrix")
    k = min(r + oversample, min(m, n))
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(X @ rng.standard_normal((n, k)))
    for _ in range(power_iters):
        Z, _ = np.linalg.qr(X.T @ Q)
        Q, _ = np.linalg.qr(X @ Z)
    Ub, s, Vt = np.linalg.svd(Q.T @ X, full_matrices=False)
    return _finish(Q @ Ub[:, :r], s[:r], Vt[:r])


def modified_gram_schmidt(A: np.ndarray):
    """Thin QR by modified Gram-Schmidt."""
    A = np.array(A, dtype=np.float64)
    m, k = A.shape
    R = np.zeros((k, k))
    for j in range(k):
        R[j, j] = np.linalg.norm(A[:, j])
        A[:, j] /= R[j, j]
        if j + 1 < k:
            R[j, j + 1:] = A[:, j] @ A[:, j + 1:]
            A[:, j + 1:] -= np.outer(A[:, j], R[j, j + 1:])
    return A, R


@dataclass
class IncrementalSVDState:
    """Running factorisation ``X_seen ~= U diag(s) Vt`` with at most ``r_max`` modes."""

    n_h: int
    r_max: int
    U: np.ndarray = None
    s: np.ndarray = None
    Vt: np.ndarray = None
    n_updates: int = 0
    discarded_energy: float = 0.0
    reorth_every: int = 50
    tol: float = 1e-12

    def __post_init__(self):
        if self.U is None:
            self.U = np.zeros((self.n_h, 0))
            self.s = np.zeros(0)
            self.Vt = np.zeros((0, 0))

    @property
    def n_cols(self) -> int:
        return self.Vt.shape[1]

    def to_basis(self, r: int | None = None):
        r = self.s.size if r is None else min(r, self.s.size)
        return _finish(self.U[:, :r], self.s[:r], self.Vt[:r])


def incremental_svd_update(state: IncrementalSVDState, new_columns: np.ndarray) -> IncrementalSVDState:
    """Fold new columns into the running factorisation.

    The part of the new data outside the current span is orthonormalised and
    appended, the small core ``[[diag(s), L], [0, K]]`` is re-diagonalised, and
    modes beyond ``r_max`` are truncated (their energy is accumulated in
    ``discarded_energy``).  ``state`` is updated in place and returned.
    """
    C = np.asarray(new_columns, dtype=np.float64)
    if C.ndim == 1:
        C = C[:, None]
    if C.shape[0] != state.n_h:
        raise ValueError(f"new columns have {C.shape[0]} rows, expected {state.n_h}")
    k, c = state.s.size, C.shape[1]
    L = state.U.T @ C
    H = C - state.U @ L
    # second projection pass keeps the residual orthogonal in floating point
    L2 = state.U.T @ H
    H -= state.U @ L2
    L += L2
    J, K = np.linalg.qr(H)
    scale = max(np.linalg.norm(C), state.s[0] if k else 0.0, 1e-300)
    keep = np.abs(np.diag(K)) > state.tol * scale
    J, K = J[:, keep], K[keep]
    core = np.zeros((k + K.shape[0], k + c))
    core[:k, :k] = np.diag(state.s)
    core[:k, k:] = L
    core[k:, k:] = K
    Uc, sc, Vct = np.linalg.svd(core, full_matrices=False)
    n_old = state.n_cols
    V_big = np.zeros((k + c, n_old + c))
    V_big[:k, :n_old] = state.Vt
    V_big[k:, n_old:] = np.eye(c)
    U = np.hstack([state.U, J]) @ Uc
    Vt = Vct @ V_big
    r = min(state.r_max, int(np.sum(sc > state.tol * scale)))
    state.discarded_energy += float(np.sum(sc[r:] ** 2))
    state.U, state.s, state.Vt = U[:, :r], sc[:r], Vt[:r]
    state.n_updates += 1
    if state.reorth_every and state.n_updates % state.reorth_every == 0:
        Q, R = modified_gram_schmidt(state.U)
        Ur, sr, Vrt = np.linalg.svd(R * state.s[None, :], full_matrices=False)
        state.U = Q @ Ur
        state.s = sr
        state.Vt = Vrt @ state.Vt
    return state


def incremental_svd(X: np.ndarray, r: int, r_max: int | None = None, batch: int = 1):
    """Stream the columns of ``X`` through incremental updates."""
    X = np.asarray(X, dtype=np.float64)
    state = IncrementalSVDState(X.shape[0], r_max or r)
    for start in range(0, X.shape[1], batch):
        incremental_svd_update(state, X[:, start:start + batch])
    return state.to_basis(r)


def hierarchical_svd(blocks, r: int, jobs: int = 1):
    """Rank-``r`` SVD of ``[B_1 | B_2 | ...]`` from per-block SVDs merged pairwise.

    Each block is factorised independently (optionally on ``jobs`` threads);
    adjacent weighted factors ``[U_a S_a | U_b S_b]`` are then re-factorised in
    a balanced tree until a single basis remains.  Coefficients are the
    projections of the concatenated blocks onto the final modes.
    """
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ValueError("no blocks given")
    n_h = blocks[0].shape[0]
    if any(b.shape[0] != n_h for b in blocks):
        raise ValueError("all blocks must have the same number of rows")
    if r < 1 or r > n_h:
        raise ValueError(f"rank {r} exceeds the block height {n_h}")

    def local(B):
        U, s, _ = np.linalg.svd(B, full_matrices=False)
        q = min(r, s.size)
        return U[:, :q] * s[:q]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            level = list(ex.map(local, blocks))
    else:
        level = [local(b) for b in blocks]
    while len(level) > 1:
        merged = [local(np.hstack(level[i:i + 2])) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            merged.append(level[-1])
        level = merged
    W = level[0]
    U, s, _ = np.linalg.svd(W, full_matrices=False)
    q = min(r, s.size)
    U, s = U[:, :q], s[:q]
    basis, _ = fix_signs(SVDBasis(U, s))
    coeffs = basis.U.T @ np.hstack(blocks)
    return basis, coeffs


# ---------------------------------------------------------------------------
# rank selection

def energy_content(sigma, r: int, total_energy: float | None = None) -> float:
    """Fraction of squared singular-value mass outside the first ``r`` modes.

    ``total_energy`` (e.g. the squared Frobenius norm of the matrix) replaces
    ``sum(sigma**2)`` when only a leading part of the spectrum is known.
    """
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    if not 1 <= r <= s2.size:
        raise ValueError(f"rank {r} outside [1, {s2.size}]")
    total = float(s2.sum()) if total_energy is None else float(total_energy)
    if total <= 0:
        raise ValueError("zero-energy matrix")
    return max(0.0, 1.0 - float(s2[:r].sum()) / total)


def select_rank(sigma, energy_tol: float = 0.01, r_cap: int = 10,
                total_energy: float | None = None) -> int:
    """Smallest rank whose discarded energy is at most ``energy_tol``, capped at ``r_cap``."""
    s = np.asarray(sigma, dtype=np.float64)
    for r in range(1, s.size + 1):
        if energy_content(s, r, total_energy) <= energy_tol:
            return min(r, r_cap)
    return min(s.size, r_cap)


# ---------------------------------------------------------------------------
# encode / decode

def encode(basis: SVDBasis, snapshots: np.ndarray, physical: bool = False) -> np.ndarray:
    """Project rescaled snapshots onto the basis (``V = U.T X``).

    With ``physical=True`` the snapshots are first rescaled with the basis'
    reference extrema.
    """
    X = np.asarray(snapshots, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != basis.n_h:
        raise ValueError(f"snapshots have {X.shape[0]} rows, basis has {basis.n_h}")
    if physical:
        X = rescale(X, basis.ref_min, basis.ref_max)
    return basis.U.T @ X


def decode(basis: SVDBasis, coeffs: np.ndarray, physical: bool = True) -> np.ndarray:
    """Map coefficients back to the full space, in field units by default."""
    V = np.asarray(coeffs, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] != basis.rank:
        raise ValueError(f"coefficients have {V.shape[0]} rows, basis rank is {basis.rank}")
    X = basis.U @ V
    return unscale_field(X, basis.ref_min, basis.ref_max) if physical else X


def field_offsets(bases: dict) -> dict:
    out, pos = {}, 0
    for fid, b in bases.items():
        out[FieldId(fid)] = (pos, b.rank)
        pos += b.rank
    return out


def encode_case(bases: dict, case: ParametricCase) -> LatentSeries:
    blocks = [encode(b, case.fields[fid], physical=True) for fid, b in bases.items()]
    return LatentSeries(np.vstack(blocks), field_offsets(bases), case.tau)


def decode_latent(bases: dict, latent: LatentSeries) -> dict:
    return {fid: decode(b, latent.block(fid)) for fid, b in bases.items()}


def compress_dataset(dataset: ParametricDataset, method: str = "randomized",
                     energy_tol: float = 0.01, r_cap: int = 10, oversample: int = 10,
                     power_iters: int = 2, seed: int = 0, fields=None) -> dict:
    """Per-field bases from the stacked TRAIN snapshots."""
    bases = {}
    train = dataset.cases_in(Split.TRAIN)
    for fid in fields or dataset.fields:
        fid = FieldId(fid)
        lo, hi = reference_extrema(dataset, fid)
        X = stack_cases(dataset, fid, Split.TRAIN, (lo, hi))
        total = float(np.sum(X * X))
        r_probe = min(r_cap, min(X.shape))
        if method == "randomized":
            basis, _ = randomized_svd(X, r_probe, oversample, power_iters, seed)
        elif method == "incremental":
            state = IncrementalSVDState(X.shape[0], max(r_probe, 25))
            for c in train:
                incremental_svd_update(state, rescale_field(c, fid, lo, hi))
            basis, _ = state.to_basis(r_probe)
        elif method == "hierarchical":
            basis, _ = hierarchical_svd([rescale_field(c, fid, lo, hi) for c in train],
                                        max(r_probe, 25))
            basis = basis.truncated(r_probe)
        elif method == "dense":
            basis, _ = dense_svd(X, r_probe)
        else:
            raise ValueError(f"unknown SVD method {method!r}")
        r = select_rank(basis.sigma, energy_tol, r_cap, total_energy=total)
        bases[fid] = SVDBasis(basis.U[:, :r], basis.sigma[:r], fid, lo, hi)
    return bases


# ---------------------------------------------------------------------------
# SHRDBASE files

BASE_MAGIC = b"SHRDBASE"
BASE_VERSION = 1


def write_basis_file(basis: SVDBasis, path) -> None:
    name = basis.field.value if basis.field is not None else ""
    data = b"".join([
        BASE_MAGIC,
        struct.pack("<I", BASE_VERSION),
        _pack_string(name),
        struct.pack("<QIdd", basis.n_h, basis.rank, basis.ref_min, basis.ref_max),
        basis.sigma.astype("<f8").tobytes(),
        np.asarray(basis.U, dtype="<f8").tobytes(order="F"),
    ])
    atomic_write_bytes(path, data)


def read_basis_file(path) -> SVDBasis:
    from pathlib import Path
    path = Path(path)
    r = read_header(path.read_bytes(), path, BASE_MAGIC, BASE_VERSION)
    name = r.string()
    n_h, rank, lo, hi = r.unpack("<QIdd")
    sigma = r.f64(rank)
    U = r.f64(n_h * rank).reshape((n_h, rank), order="F")
    r.expect_end()
    return SVDBasis(U, sigma, FieldId(name) if name else None, lo, hi)
