import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shredkit.compression import decode, dense_svd, encode, rescale
from shredkit.core import FieldId, Grid2D, Region
from shredkit.metrics import (
    REPORT_FIELDS, core_weights, emit_report, field_error, field_matrix, latent_error,
    relative_column_error, spatial_average_series, strategy_table_csv,
)


def fields_of(rng, n=20, n_t=6):
    return {f: rng.normal(size=(n, n_t)) + 3.0 for f in FieldId}


# ---- latent error

def test_latent_error_examples():
    rng = np.random.default_rng(0)
    truth = [rng.normal(size=(5, 8)) for _ in range(3)]
    assert latent_error(truth, truth) == 0.0
    assert latent_error([1.046 * t for t in truth], truth) == pytest.approx(0.046, abs=1e-12)


def test_latent_error_matches_loop():
    rng = np.random.default_rng(1)
    truth = [rng.normal(size=(4, 7)) for _ in range(3)]
    pred = [rng.normal(size=(4, 7)) for _ in range(3)]
    total = 0.0
    for p, t in zip(pred, truth):
        acc = 0.0
        for j in range(t.shape[1]):
            acc += np.sqrt(sum((p[i, j] - t[i, j]) ** 2 for i in range(4))) / \
                np.sqrt(sum(t[i, j] ** 2 for i in range(4)))
        total += acc / t.shape[1]
    assert latent_error(pred, truth) == pytest.approx(total / 3, rel=1e-12)


def test_zero_truth_column_rejected():
    t = np.ones((3, 4))
    t[:, 2] = 0
    with pytest.raises(ValueError, match="zero-norm"):
        latent_error([t], [t])
    with pytest.raises(ValueError):
        latent_error([], [])
    with pytest.raises(ValueError):
        relative_column_error(np.ones((2, 3)), np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_metrics_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    t, p = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    assert latent_error([scale * p], [scale * t]) == pytest.approx(latent_error([p], [t]), rel=1e-9)
    ft, fp = fields_of(rng), fields_of(rng)
    scaled = lambda d: {k: scale * v for k, v in d.items()}
    assert field_error([scaled(fp)], [scaled(ft)], FieldId.FLUX) == \
        pytest.approx(field_error([fp], [ft], FieldId.FLUX), rel=1e-9)


# ---- field error

def test_field_error_examples():
    rng = np.random.default_rng(2)
    truth = [fields_of(rng) for _ in range(2)]
    assert field_error(truth, truth, FieldId.TEMPERATURE) == 0.0
    over = [{k: 1.02 * v for k, v in f.items()} for f in truth]
    for name in REPORT_FIELDS:
        assert field_error(over, truth, name) == pytest.approx(0.02, abs=1e-12)


def test_velocity_stacks_components():
    rng = np.random.default_rng(3)
    f = fields_of(rng)
    V = field_matrix(f, "VELOCITY")
    np.testing.assert_array_equal(V, np.vstack([f[FieldId.VELOCITY_X], f[FieldId.VELOCITY_Y]]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), r=st.integers(1, 5))
def test_projection_error_is_a_lower_bound(seed, r):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 12)) + 5.0
    lo, hi = X.min(), X.max()
    basis, _ = dense_svd(rescale(X, lo, hi), r)
    basis = type(basis)(basis.U, basis.sigma, None, lo, hi)
    V = encode(basis, X, physical=True)
    best = field_error([{FieldId.FLUX: decode(basis, V)}], [{FieldId.FLUX: X}], FieldId.FLUX)
    other = V + 0.1 * rng.normal(size=V.shape)
    worse = field_error([{FieldId.FLUX: decode(basis, other)}], [{FieldId.FLUX: X}], FieldId.FLUX)
    assert best <= worse + 1e-12


# ---- spatial averages

def test_spatial_average_constant_and_linear():
    g = Grid2D(8, 16, 0, 1, 0, 2)
    x, y = g.node_coordinates()
    const = {FieldId.TEMPERATURE: np.full((g.n_nodes, 4), 2.5)}
    np.testing.assert_allclose(spatial_average_series(const, FieldId.TEMPERATURE, g), 2.5, rtol=1e-14)
    lin = {FieldId.TEMPERATURE: np.repeat((3 * x + 1)[:, None], 3, axis=1)}
    np.testing.assert_allclose(spatial_average_series(lin, FieldId.TEMPERATURE, g), 3 * 0.5 + 1,
                               rtol=1e-12)


def test_spatial_average_matches_loop():
    g = Grid2D.with_reflector(8, 16)
    rng = np.random.default_rng(4)
    X = rng.normal(size=(g.n_nodes, 5))
    got = spatial_average_series({FieldId.FLUX: X}, FieldId.FLUX, g)
    area = g.area_weights()
    for k in range(5):
        num = den = 0.0
        for n in range(g.n_nodes):
            if g.region_label[n] == Region.CORE:
                num += area[n] * X[n, k]
                den += area[n]
        assert got[k] == pytest.approx(num / den, rel=1e-12)
    assert core_weights(g)[g.region_label == Region.REFLECTOR].sum() == 0


# ---- reports

def table_errors():
    return {s: {f: 0.01 * (i + 1) + 0.001 * j for j, f in enumerate(REPORT_FIELDS)}
            for i, s in enumerate(("FIXED_OUTCORE", "MOBILE_SENSOR", "MOBILE_PROBES"))}


def test_table_layout():
    lines = strategy_table_csv(table_errors()).splitlines()
    assert lines[0] == "field,FIXED_OUTCORE,MOBILE_SENSOR,MOBILE_PROBES"
    assert [l.split(",")[0] for l in lines[1:]] == list(REPORT_FIELDS)
    assert all(len(l.split(",")) == 4 for l in lines)


def test_emit_report_deterministic(tmp_path):
    sweep = [(2, 0.02, 1.0), (4, 0.01, 0.5)]
    a = emit_report(tmp_path / "a", table_errors(), sweep_rows=sweep)
    b = emit_report(tmp_path / "b", table_errors(), sweep_rows=sweep)
    assert [p.name for p in a] == ["table1_sensitivity.csv", "table2_field_errors.csv"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_emit_report_requires_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_report(tmp_path, {})
