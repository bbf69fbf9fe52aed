"""Ensembles of SHRED models trained on different sensor configurations."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .sensing import SensorConfig, Strategy, non_collinear

ENUMERATION_LIMIT = 200_000


@dataclass(frozen=True, eq=False)
class EnsemblePrediction:
    """Mean, sample std and xi for every case; arrays are ``r_total x N_t``."""

    mean: list
    sample_std: list
    xi_per_case: np.ndarray
    xi: float
    L: int
    member_ids: tuple

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("an ensemble needs L >= 2 for a sample std")
        if any(np.any(s < 0) for s in self.sample_std):
            raise ValueError("sample std must be non-negative")


def valid_subsets(pool, choose: int, check_collinear: bool = True) -> list:
    n = len(pool)
    out = []
    for combo in itertools.combinations(range(n), choose):
        if check_collinear and choose == 3 and not non_collinear([pool[i] for i in combo]):
            continue
        out.append(combo)
    return out


def sample_subsets(pool, choose: int, L: int, seed=0, check_collinear: bool = True) -> list:
    """``L`` distinct index subsets drawn uniformly without replacement.

    The draw is prefix-consistent: the first ``l`` subsets do not depend on ``L``.
    """
    n = len(pool)
    if choose < 1 or choose > n:
        raise ValueError(f"cannot choose {choose} of {n} positions")
    rng = np.random.default_rng(seed)
    if math.comb(n, choose) <= ENUMERATION_LIMIT:
        subsets = valid_subsets(pool, choose, check_collinear)
        if len(subsets) < L:
            raise ValueError(f"only {len(subsets)} valid subsets, {L} requested")
        pick = rng.permutation(len(subsets))[:L]
        return [subsets[i] for i in pick]
    # pool too large to enumerate: rejection sampling of sorted tuples
    seen, out = set(), []
    tries = 0
    while len(out) < L:
        tries += 1
        if tries > 1000 * L:
            raise ValueError("not enough valid subsets found")
        combo = tuple(sorted(rng.choice(n, size=choose, replace=False).tolist()))
        if combo in seen:
            continue
        if check_collinear and choose == 3 and not non_collinear([pool[i] for i in combo]):
            continue
        seen.add(combo)
        out.append(combo)
    return out


def sample_configurations(pool, choose: int, L: int, seed=0,
                          strategy: Strategy = Strategy.FIXED_OUTCORE,
                          noise_sigma: float = 0.01, measured_field=None) -> list:
    """``L`` sensor configurations from distinct subsets of ``pool``.

    Collinearity is only screened for fixed sensors; mobile start points may
    line up.  Member ``l`` gets its own noise seed derived from ``seed``.
    """
    strategy = Strategy(strategy)
    pool = [tuple(float(v) for v in p) for p in np.asarray(pool, dtype=float)]
    subsets = sample_subsets(pool, choose, L, seed,
                             check_collinear=strategy is Strategy.FIXED_OUTCORE)
    seeds = member_seeds(seed, L)
    return [SensorConfig(strategy, tuple(pool[i] for i in sub), measured_field, noise_sigma,
                         seeds[l])
            for l, sub in enumerate(subsets)]


def member_seeds(seed, L: int) -> list:
    """Independent per-member seeds; member ``l`` is the same for any ``L > l``."""
    return [int(np.random.SeedSequence([int(seed), l]).generate_state(1)[0]) for l in range(L)]


def aggregate(predictions) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean, sample std (ddof 1) and xi for a stack ``(L, r, N_t)``."""
    P = np.asarray(predictions, dtype=float)
    L = P.shape[0]
    if L < 2:
        raise ValueError("need at least two members")
    # averaging deviations from the first member keeps identical members exact
    mean = P[0] + (P - P[0]).mean(axis=0)
    std = np.sqrt(np.sum((P - mean) ** 2, axis=0) / (L - 1))
    xi = float(np.sqrt(np.mean(std ** 2 / L)))
    return mean, std, xi


def ensemble_predict(member_predictions, member_ids=None) -> EnsemblePrediction:
    """Combine per-member predictions.

    ``member_predictions[l][j]`` is member ``l``'s ``r_total x N_t`` latent
    prediction for case ``j``.  The aggregate xi is the RMS over every case,
    coefficient and time.
    """
    L = len(member_predictions)
    if L < 2:
        raise ValueError("an ensemble needs at least two members")
    n_cases = len(member_predictions[0])
    if any(len(m) != n_cases for m in member_predictions):
        raise ValueError("members predict different numbers of cases")
    means, stds, xis = [], [], []
    sq, count = 0.0, 0
    for j in range(n_cases):
        stack = [np.asarray(m[j], dtype=float) for m in member_predictions]
        shapes = {s.shape for s in stack}
        if len(shapes) != 1:
            raise ValueError(f"member shape mismatch for case {j}: {sorted(shapes)}")
        mean, std, xi = aggregate(stack)
        means.append(mean)
        stds.append(std)
        xis.append(xi)
        sq += float(np.sum(std ** 2 / L))
        count += std.size
    ids = tuple(range(L)) if member_ids is None else tuple(member_ids)
    return EnsemblePrediction(means, stds, np.array(xis), math.sqrt(sq / count), L, ids)


def sensitivity_sweep(member_prediction, L_values) -> list:
    """Rows ``(L, xi_L, xi_L / xi_max)`` over nested member sets.

    ``member_prediction(l)`` returns member ``l``'s per-case predictions; it
    is called once per member, so ``L = 10`` extends the members of ``L = 8``.
    """
    L_values = sorted({int(L) for L in L_values})
    if not L_values or L_values[0] < 2:
        raise ValueError("sweep values must be >= 2")
    cache = []
    xis = []
    for L in L_values:
        while len(cache) < L:
            cache.append(member_prediction(len(cache)))
        xis.append(ensemble_predict(cache[:L]).xi)
    xi_max = max(xis)
    return [(L, xi, xi / xi_max if xi_max > 0 else 0.0) for L, xi in zip(L_values, xis)]


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "xi", "xi_normalized"])
    for L, xi, xn in rows:
        w.writerow([L, f"{xi:.6e}", f"{xn:.6f}"])
    return buf.getvalue()
