import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shredkit.core import FieldId, Split
from shredkit.surrogate import (
    CFLError, SurrogateConfig, _Stepper, assign_splits, generate_dataset, pump_factor,
    simulate_case, split_sizes, velocity_at,
)

BOUNDS = (0.0, 1.0, 0.0, 2.0)


def small(**kw):
    base = dict(nx=12, ny=24, n_steps=20, substeps=4, tau_list=(1.0, 4.0, 10.0))
    base.update(kw)
    return SurrogateConfig(**base)


def test_pump_factor_examples():
    assert pump_factor(0.0, 3.0) == 1.0
    assert pump_factor(1e4, 3.0) == pytest.approx(0.05, abs=1e-15)
    e = math.exp(-1.0)
    assert pump_factor(10.0, 10.0) == pytest.approx(e + 0.05 * (1 - e), rel=1e-14)
    assert pump_factor(10.0, 10.0) == pytest.approx(0.3994854, abs=5e-7)


def test_pump_factor_rejects_bad_tau():
    with pytest.raises(ValueError):
        pump_factor(1.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(t=st.floats(0.01, 10), dt=st.floats(0.01, 5), tau=st.floats(1, 10), dtau=st.floats(0.01, 5))
def test_pump_factor_monotone(t, dt, tau, dtau):
    assert pump_factor(t + dt, tau) < pump_factor(t, tau)
    assert pump_factor(t, tau + dtau) > pump_factor(t, tau)
    assert 0.05 < pump_factor(t, tau) <= 1.0


def test_velocity_center_and_boundary():
    np.testing.assert_allclose(velocity_at([0.5, 1.0], 0.0, 5.0), 0.0, atol=1e-15)
    for y in np.linspace(0, 2, 7):
        assert abs(velocity_at([0.0, y], 0.3, 5.0)[0]) < 1e-15
        assert abs(velocity_at([1.0, y], 0.3, 5.0)[0]) < 1e-15
    for x in np.linspace(0, 1, 7):
        assert abs(velocity_at([x, 0.0], 0.3, 5.0)[1]) < 1e-15
        assert abs(velocity_at([x, 2.0], 0.3, 5.0)[1]) < 1e-15


def test_velocity_ratio_equals_pump_factor():
    p = [0.3, 0.7]
    tau = 4.0
    ratio = np.linalg.norm(velocity_at(p, tau, tau)) / np.linalg.norm(velocity_at(p, 0.0, tau))
    assert ratio == pytest.approx(pump_factor(tau, tau), rel=1e-12)


def test_velocity_out_of_domain():
    with pytest.raises(ValueError):
        velocity_at([1.5, 0.5], 0.0, 2.0)


def test_velocity_divergence_free():
    u0, h = 0.3, 1e-4
    xs = np.linspace(0.05, 0.95, 15)
    ys = np.linspace(0.05, 1.95, 15)
    for x in xs:
        for y in ys:
            dux = (velocity_at([x + h, y], 0, 1)[0] - velocity_at([x - h, y], 0, 1)[0]) / (2 * h)
            duy = (velocity_at([x, y + h], 0, 1)[1] - velocity_at([x, y - h], 0, 1)[1]) / (2 * h)
            assert abs(dux + duy) < 1e-6 * u0


def test_equilibrium_without_sources():
    cfg = small(feedback=0.0, heat_source=0.0, heat_sink=0.0, precursor_yield=0.0,
                precursor_decay=0.0,
                initial_values={"FLUX": 0.0, "TEMPERATURE": 900.0, "PRECURSOR": 3.0})
    case = simulate_case(cfg, 2.0)
    for f, v in ((FieldId.FLUX, 0.0), (FieldId.TEMPERATURE, 900.0), (FieldId.PRECURSOR, 3.0)):
        np.testing.assert_allclose(case.fields[f], v, atol=1e-9 * max(v, 1))


def test_precursor_mass_decays_exponentially():
    lam = 0.3
    cfg = small(n_steps=101, precursor_yield=0.0, precursor_decay=lam, feedback=0.0,
                initial_values={"FLUX": 0.0, "TEMPERATURE": 900.0, "PRECURSOR": 2.0})
    case = simulate_case(cfg, 3.0)
    mass = case.fields[FieldId.PRECURSOR].sum(axis=0)
    t = case.times
    np.testing.assert_allclose(mass, mass[0] * np.exp(-lam * t), rtol=0.01)


def test_advected_mass_conserved():
    cfg = small()
    stepper = _Stepper(cfg)
    rng = np.random.default_rng(0)
    c = rng.uniform(0.5, 1.5, stepper.shape)
    m0 = c.sum()
    for k in range(cfg.n_steps * cfg.substeps):
        c = c + stepper.h * (-stepper.advect(c, pump_factor(k * stepper.h, 2.0))
                             + cfg.d_temp * stepper.laplacian(c))
    assert abs(c.sum() - m0) / m0 < 0.005


def test_determinism_and_shapes():
    cfg = small(n_steps=5)
    a, b = simulate_case(cfg, 2.0), simulate_case(cfg, 2.0)
    assert a == b
    assert set(a.fields) == set(FieldId)
    assert a.fields[FieldId.FLUX].shape == (12 * 24, 5)


def test_velocity_fields_follow_velocity_at():
    cfg = small(n_steps=5)
    case = simulate_case(cfg, 2.0)
    g = cfg.grid()
    x, y = g.node_coordinates()
    n, k = 37, 3
    u = velocity_at([x[n], y[n]], k * cfg.dt, 2.0, cfg.u0, BOUNDS)
    assert case.fields[FieldId.VELOCITY_X][n, k] == pytest.approx(u[0], rel=1e-12)
    assert case.fields[FieldId.VELOCITY_Y][n, k] == pytest.approx(u[1], rel=1e-12)


def test_cfl_violation_rejected():
    with pytest.raises(CFLError):
        simulate_case(small(substeps=1, dt=1.0), 2.0)


def test_split_sizes():
    assert split_sizes(21) == (15, 3, 3)
    assert split_sizes(3) == (1, 1, 1)
    assert split_sizes(9) == (7, 1, 1)


def test_split_assignment_deterministic():
    assert assign_splits(21, 7) == assign_splits(21, 7)
    tags = assign_splits(21, 7)
    assert [tags.count(s) for s in Split] == [15, 3, 3]


def test_interior_split_keeps_extremes_in_train():
    taus = np.geomspace(1, 10, 9)
    for seed in range(20):
        tags = assign_splits(9, seed, taus, interior=True)
        assert tags[0] == Split.TRAIN and tags[-1] == Split.TRAIN
        held = [i for i, t in enumerate(tags) if t != Split.TRAIN]
        assert all(b - a > 1 for a, b in zip(held, held[1:]))
    for seed in range(5):
        tags = assign_splits(21, seed, np.geomspace(1, 10, 21), interior=True)
        assert [tags.count(s) for s in Split] == [15, 3, 3]
        held = [i for i, t in enumerate(tags) if t != Split.TRAIN]
        assert all(b - a > 1 for a, b in zip(held, held[1:]))


def test_generate_three_cases():
    ds = generate_dataset(small(n_steps=3))
    assert sorted(s.value for s in ds.split) == ["TEST", "TRAIN", "VALIDATION"]
    assert [c.tau for c in ds.cases] == [1.0, 4.0, 10.0]
