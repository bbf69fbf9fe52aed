"""Synthetic coupled-physics stand-in for a circulating-fuel loss-of-flow transient.

A prescribed single-vortex flow, scaled in time by an exponential pump
coast-down, advects temperature and precursors; the flux follows a
diffusion-reaction equation with temperature feedback.  Heat leaves through a
cold strip whose transfer coefficient scales like ``pump ** 0.4``, so a flow
drop heats the core and the flux answers within about a second, while the
late power settles near a quarter of nominal instead of collapsing.  Updates are explicit
first order: upwind finite-volume advection with face fluxes taken from the
stream function (so the discrete flow is exactly divergence free), central
diffusion, and forward Euler in time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import FieldId, Grid2D, ParametricCase, ParametricDataset, Region, Split

log = logging.getLogger(__name__)

NATURAL_CIRCULATION = 0.05


class CFLError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass
class SurrogateConfig:
    nx: int = 64
    ny: int = 128
    length_x: float = 1.0
    length_y: float = 2.0
    reflector_thickness: float = 0.1
    tau_list: tuple = tuple(np.geomspace(1.0, 10.0, 9))
    n_steps: int = 200
    dt: float = 0.05
    substeps: int = 16
    u0: float = 0.3
    d_flux: float = 0.05
    d_temp: float = 0.004
    d_prec: float = 0.001
    reactivity: float = 1.0
    reflector_absorption: float = 2.0
    feedback: float = 0.05
    t_ref: float = 900.0
    heat_source: float = 100.0
    heat_sink: float = 8.0
    t_cold: float = 850.0
    sink_flow_exponent: float = 0.4
    precursor_yield: float = 1.0
    precursor_decay: float = 0.3
    seed: int = 0
    holdout_interior: bool = False
    steady_tol: float = 1e-8
    steady_max_steps: int = 200_000
    initial_values: dict | None = None

    def grid(self) -> Grid2D:
        return Grid2D.with_reflector(self.nx, self.ny, self.reflector_thickness,
                                     0.0, self.length_x, 0.0, self.length_y)

    def validate(self) -> None:
        if any(not (1.0 <= t <= 10.0) for t in self.tau_list):
            raise ValueError("tau values must lie in [1, 10] s")
        if self.n_steps < 2 or self.dt <= 0 or self.substeps < 1:
            raise ValueError("need n_steps >= 2, dt > 0, substeps >= 1")
        cfl = cfl_number(self)
        if cfl > 1.0:
            raise CFLError(f"explicit stability bound violated: CFL number {cfl:.3f} > 1")


def pump_factor(t, tau: float):
    """Relative pump flow ``exp(-t/tau)`` with a natural-circulation floor."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    decay = np.exp(-t / tau)
    out = decay + NATURAL_CIRCULATION * (1.0 - decay)
    return float(out) if out.ndim == 0 else out


def stream_function(x, y, u0: float, bounds) -> np.ndarray:
    x0, x1, y0, y1 = bounds
    xh = (np.asarray(x, dtype=float) - x0) / (x1 - x0)
    yh = (np.asarray(y, dtype=float) - y0) / (y1 - y0)
    return u0 * np.sin(np.pi * xh) * np.sin(np.pi * yh)


def steady_velocity(x, y, u0: float, bounds):
    """Curl of the stream function at full pump flow."""
    x0, x1, y0, y1 = bounds
    lx, ly = x1 - x0, y1 - y0
    xh = (np.asarray(x, dtype=float) - x0) / lx
    yh = (np.asarray(y, dtype=float) - y0) / ly
    ux = u0 * np.pi / ly * np.sin(np.pi * xh) * np.cos(np.pi * yh)
    uy = -u0 * np.pi / lx * np.cos(np.pi * xh) * np.sin(np.pi * yh)
    return ux, uy


def velocity_at(x, t: float, tau: float, u0: float = 0.3,
                bounds=(0.0, 1.0, 0.0, 2.0)) -> np.ndarray:
    """Velocity of the prescribed recirculating flow at position ``x``."""
    x = np.asarray(x, dtype=float)
    x0, x1, y0, y1 = bounds
    eps = 1e-12 * max(x1 - x0, y1 - y0)
    if not (x0 - eps <= x[0] <= x1 + eps and y0 - eps <= x[1] <= y1 + eps):
        raise ValueError(f"position {tuple(x)} outside the domain")
    ux, uy = steady_velocity(x[0], x[1], u0, bounds)
    return pump_factor(t, tau) * np.array([ux, uy])


def _bounds(cfg: SurrogateConfig):
    return (0.0, cfg.length_x, 0.0, cfg.length_y)


def face_flows(cfg: SurrogateConfig):
    """Volume flow rates through cell faces at full pump flow.

    Returns ``(fx, fy)`` with ``fx`` of shape ``(ny, nx + 1)`` (flow in +x through
    vertical faces) and ``fy`` of shape ``(ny + 1, nx)`` (flow in +y through
    horizontal faces).  Built as stream-function differences between cell
    corners, so every cell's net outflow vanishes to round-off.
    """
    xs = np.linspace(0.0, cfg.length_x, cfg.nx + 1)
    ys = np.linspace(0.0, cfg.length_y, cfg.ny + 1)
    X, Y = np.meshgrid(xs, ys)
    psi = stream_function(X, Y, cfg.u0, _bounds(cfg))
    fx = psi[1:, :] - psi[:-1, :]
    fy = -(psi[:, 1:] - psi[:, :-1])
    return fx, fy


def cfl_number(cfg: SurrogateConfig) -> float:
    """Largest explicit-update weight sum at peak pump flow; stable when <= 1."""
    h_sub = cfg.dt / cfg.substeps
    hx, hy = cfg.length_x / cfg.nx, cfg.length_y / cfg.ny
    fx, fy = face_flows(cfg)
    out = (np.maximum(fx[:, 1:], 0) + np.maximum(-fx[:, :-1], 0)
           + np.maximum(fy[1:, :], 0) + np.maximum(-fy[:-1, :], 0))
    adv = out.max() / (hx * hy)
    d = max(cfg.d_temp, cfg.d_prec)
    diff = 2.0 * d * (1.0 / hx**2 + 1.0 / hy**2)
    return h_sub * (adv + diff + cfg.precursor_decay)


def flux_subcycles(cfg: SurrogateConfig) -> int:
    """Flux updates per transport substep, chosen to keep the flux diffusion
    weight at or below 0.9."""
    hx, hy = cfg.length_x / cfg.nx, cfg.length_y / cfg.ny
    # Dirichlet faces see half a cell, hence 3 rather than 2 per direction.
    weight = cfg.dt / cfg.substeps * (cfg.d_flux * (3.0 / hx**2 + 3.0 / hy**2)
                                      + cfg.reflector_absorption)
    return max(1, math.ceil(weight / 0.9))


class _Stepper:
    """Explicit transport operators on a cell-centred grid."""

    def __init__(self, cfg: SurrogateConfig):
        self.cfg = cfg
        self.grid = cfg.grid()
        g = self.grid
        self.shape = (g.ny, g.nx)
        self.hx, self.hy = g.hx, g.hy
        self.vol = g.hx * g.hy
        self.fx, self.fy = face_flows(cfg)
        inner_x, inner_y = self.fx[:, 1:-1], self.fy[1:-1, :]
        self.fxp, self.fxn = np.maximum(inner_x, 0), np.minimum(inner_x, 0)
        self.fyp, self.fyn = np.maximum(inner_y, 0), np.minimum(inner_y, 0)
        labels = g.region_label.reshape(self.shape)
        self.core = (labels == Region.CORE).astype(float)
        x, _ = g.node_coordinates()
        xh = (x / cfg.length_x).reshape(self.shape)
        self.sink_zone = self.core * (xh >= 0.75)
        self.reactivity = np.where(self.core > 0, cfg.reactivity, -cfg.reflector_absorption)
        self.h = cfg.dt / cfg.substeps
        self.n_flux = flux_subcycles(cfg)

    def advect(self, c, pump):
        """Upwind divergence of the advective flux, per unit volume."""
        # boundary faces carry no flow, so only interior faces are formed
        fx = self.fxp * c[:, :-1] + self.fxn * c[:, 1:]
        fy = self.fyp * c[:-1, :] + self.fyn * c[1:, :]
        div = np.zeros_like(c)
        div[:, :-1] += fx
        div[:, 1:] -= fx
        div[:-1, :] += fy
        div[1:, :] -= fy
        return div * (pump / self.vol)

    def laplacian(self, c, dirichlet=False):
        lap = np.zeros_like(c)
        dx = (c[:, 1:] - c[:, :-1]) / self.hx**2
        dy = (c[1:, :] - c[:-1, :]) / self.hy**2
        lap[:, :-1] += dx
        lap[:, 1:] -= dx
        lap[:-1, :] += dy
        lap[1:, :] -= dy
        if dirichlet:
            # zero value on the boundary face, half a cell away
            lap[:, 0] -= 2.0 * c[:, 0] / self.hx**2
            lap[:, -1] -= 2.0 * c[:, -1] / self.hx**2
            lap[0, :] -= 2.0 * c[0, :] / self.hy**2
            lap[-1, :] -= 2.0 * c[-1, :] / self.hy**2
        return lap

    def step(self, state, pump):
        cfg = self.cfg
        phi, temp, prec = state
        h = self.h
        growth = self.reactivity - cfg.feedback * (temp - cfg.t_ref)
        hf = h / self.n_flux
        new_phi = phi
        for _ in range(self.n_flux):
            new_phi = new_phi + hf * (cfg.d_flux * self.laplacian(new_phi, dirichlet=True)
                                      + growth * new_phi)
        dtemp = (-self.advect(temp, pump) + cfg.d_temp * self.laplacian(temp)
                 + cfg.heat_source * self.core * phi
                 - cfg.heat_sink * pump ** cfg.sink_flow_exponent * self.sink_zone
                 * (temp - cfg.t_cold))
        dprec = (-self.advect(prec, pump) + cfg.d_prec * self.laplacian(prec)
                 - cfg.precursor_decay * prec + cfg.precursor_yield * self.core * phi)
        return new_phi, temp + h * dtemp, prec + h * dprec


def _initial_guess(st: _Stepper):
    cfg = st.cfg
    x, y = st.grid.node_coordinates()
    xh = (x / cfg.length_x).reshape(st.shape)
    yh = (y / cfg.length_y).reshape(st.shape)
    phi = np.sin(np.pi * xh) * np.sin(np.pi * yh)
    temp = np.full(st.shape, cfg.t_ref + cfg.reactivity / cfg.feedback if cfg.feedback else cfg.t_ref)
    prec = cfg.precursor_yield * phi / max(cfg.precursor_decay, 1e-12)
    return phi, temp, prec


_STEADY_CACHE: dict = {}


def steady_state(cfg: SurrogateConfig):
    """Fields at full pump flow, marched until the relative change per step is
    below ``cfg.steady_tol``."""
    key = repr(sorted((k, v) for k, v in vars(cfg).items()
                      if k not in ("tau_list", "n_steps", "seed", "holdout_interior")))
    if key in _STEADY_CACHE:
        return tuple(a.copy() for a in _STEADY_CACHE[key])
    st = _Stepper(cfg)
    state = _initial_guess(st)
    for it in range(cfg.steady_max_steps):
        new = st.step(state, 1.0)
        num = sum(float(np.sum((a - b) ** 2)) for a, b in zip(new, state))
        den = sum(float(np.sum(a ** 2)) for a in new)
        state = new
        if not all(np.isfinite(a).all() for a in state):
            raise SimulationError(f"non-finite field while seeking steady state (step {it})")
        if math.sqrt(num / den) < cfg.steady_tol:
            break
    else:
        log.warning("steady state not reached within %d steps", cfg.steady_max_steps)
    _STEADY_CACHE[key] = tuple(a.copy() for a in state)
    return state


def simulate_case(config: SurrogateConfig, tau: float) -> ParametricCase:
    """March one loss-of-flow transient and store every save step."""
    config.validate()
    st = _Stepper(config)
    if config.initial_values is not None:
        iv = {FieldId(k): float(v) for k, v in config.initial_values.items()}
        state = tuple(np.full(st.shape, iv.get(f, 0.0))
                      for f in (FieldId.FLUX, FieldId.TEMPERATURE, FieldId.PRECURSOR))
    else:
        state = steady_state(config)
    n_h, n_t = st.grid.n_nodes, config.n_steps
    out = {f: np.empty((n_h, n_t), order="F") for f in
           (FieldId.VELOCITY_X, FieldId.VELOCITY_Y, FieldId.TEMPERATURE,
            FieldId.FLUX, FieldId.PRECURSOR)}
    x, y = st.grid.node_coordinates()
    ux, uy = steady_velocity(x, y, config.u0, _bounds(config))
    h = st.h
    for k in range(n_t):
        t = k * config.dt
        p = pump_factor(t, tau)
        out[FieldId.VELOCITY_X][:, k] = p * ux
        out[FieldId.VELOCITY_Y][:, k] = p * uy
        out[FieldId.FLUX][:, k] = state[0].reshape(-1)
        out[FieldId.TEMPERATURE][:, k] = state[1].reshape(-1)
        out[FieldId.PRECURSOR][:, k] = state[2].reshape(-1)
        if k == n_t - 1:
            break
        for sub in range(config.substeps):
            state = st.step(state, pump_factor(t + sub * h, tau))
        if not all(np.isfinite(a).all() for a in state):
            raise SimulationError(f"non-finite field at step {k + 1} (tau={tau})")
    return ParametricCase(tau=float(tau), dt=config.dt, fields=out)


def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/validation/test counts for ``n`` parameters (about 71.4/14.3/14.3 %)."""
    if n < 3:
        raise ValueError("need at least 3 parameters to split")
    n_val = max(1, round(n * 0.143))
    n_test = max(1, round(n * 0.143))
    return n - n_val - n_test, n_val, n_test


def assign_splits(n: int, seed: int, taus=None, interior: bool = False) -> list:
    """Seeded random split.  With ``interior`` the smallest and largest tau stay
    in TRAIN and no two held-out cases are neighbours in tau, so every held-out
    case interpolates between its two adjacent training cases."""
    n_train, n_val, _ = split_sizes(n)
    rng = np.random.default_rng(seed)
    if interior and n >= 5:
        order = np.argsort(np.arange(n) if taus is None else np.asarray(taus))
        pos = np.empty(n, dtype=int)
        pos[order] = np.arange(n)
        ends = [int(order[0]), int(order[-1])]
        rest = np.array([i for i in range(n) if i not in ends])
        for _ in range(1000):
            perm = np.concatenate([ends, rest[rng.permutation(len(rest))]])
            held = np.sort(pos[perm[n_train:]])
            if np.all(np.diff(held) > 1):
                break
    else:
        perm = rng.permutation(n)
    tags = [Split.TEST] * n
    for rank, idx in enumerate(perm):
        if rank < n_train:
            tags[idx] = Split.TRAIN
        elif rank < n_train + n_val:
            tags[idx] = Split.VALIDATION
    return tags


def generate_dataset(config: SurrogateConfig, jobs: int = 1) -> ParametricDataset:
    taus = [float(t) for t in config.tau_list]
    if len(taus) < 3:
        raise ValueError("need at least 3 tau values")
    config.validate()
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cases = list(ex.map(simulate_case, [config] * len(taus), taus))
    else:
        cases = [simulate_case(config, t) for t in taus]
    return ParametricDataset(grid=config.grid(), cases=cases,
                             split=assign_splits(len(taus), config.seed, taus,
                                                 config.holdout_interior), seed=config.seed)
