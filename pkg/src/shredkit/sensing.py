"""Synthetic sensors: fixed point sensors, a mobile sensor riding the flow, and
position-only probes.  Also particle tracking and lagged-window assembly."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FieldId, Grid2D, ParametricCase, Region, atomic_write_bytes

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    FIXED_OUTCORE = "FIXED_OUTCORE"
    MOBILE_SENSOR = "MOBILE_SENSOR"
    MOBILE_PROBES = "MOBILE_PROBES"


ANGLE_TOL = 1e-3

# normalized-coordinate boxes of the start regions for mobile strategies
DOWNCOMER = (0.75, 1.0, 0.0, 1.0)
BOTTOM = (0.0, 1.0, 0.0, 0.2)


@dataclass(frozen=True)
class SensorConfig:
    strategy: Strategy
    positions: tuple
    measured_field: FieldId | None = None
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        strategy = Strategy(self.strategy)
        object.__setattr__(self, "strategy", strategy)
        pts = tuple(tuple(float(v) for v in p) for p in self.positions)
        object.__setattr__(self, "positions", pts)
        default = {Strategy.FIXED_OUTCORE: FieldId.FLUX,
                   Strategy.MOBILE_SENSOR: FieldId.PRECURSOR,
                   Strategy.MOBILE_PROBES: None}[strategy]
        if self.measured_field is None:
            object.__setattr__(self, "measured_field", default)
        elif strategy is Strategy.MOBILE_PROBES:
            raise ValueError("probes measure positions only")
        else:
            object.__setattr__(self, "measured_field", FieldId(self.measured_field))
        expected = {Strategy.FIXED_OUTCORE: 3, Strategy.MOBILE_SENSOR: 1,
                    Strategy.MOBILE_PROBES: 3}[strategy]
        if len(pts) != expected:
            raise ValueError(f"{strategy.value} needs {expected} positions, got {len(pts)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def input_dim(self) -> int:
        return 6 if self.strategy is Strategy.MOBILE_PROBES else 3

    def validate(self, grid: Grid2D) -> None:
        if self.strategy is Strategy.FIXED_OUTCORE:
            for p in self.positions:
                if region_at(grid, p) != Region.REFLECTOR:
                    raise ValueError(f"fixed sensor {p} is not in the reflector")
            if not non_collinear(self.positions):
                raise ValueError("fixed sensors are collinear")
        else:
            box = DOWNCOMER if self.strategy is Strategy.MOBILE_SENSOR else BOTTOM
            for p in self.positions:
                if region_at(grid, p) != Region.CORE or not _in_box(grid, p, box):
                    raise ValueError(f"start position {p} outside the allowed core subregion")


@dataclass(frozen=True, eq=False)
class MeasurementSeries:
    values: np.ndarray
    stuck_flags: np.ndarray | None = None
    strategy: Strategy | None = None
    dt: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] not in (3, 6):
            raise ValueError("measurements must be s x N_t with s in {3, 6}")
        if not np.isfinite(v).all():
            raise ValueError("non-finite measurement")
        object.__setattr__(self, "values", v)
        if self.stuck_flags is not None:
            f = np.asarray(self.stuck_flags, dtype=bool)
            if f.ndim != 2 or np.any(f[:, :-1] & ~f[:, 1:]):
                raise ValueError("stuck flags must be monotone in time")
            object.__setattr__(self, "stuck_flags", f)

    @property
    def s(self) -> int:
        return self.values.shape[0]

    @property
    def n_t(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class LaggedWindows:
    """``windows[k]`` is the ``(K + 1) x s`` block ``[y_{k-K}, ..., y_k]``."""

    windows: np.ndarray
    lag: int


# ---------------------------------------------------------------------------
# geometry helpers

def _nearest_node(grid: Grid2D, p) -> int:
    i = min(max(int((p[0] - grid.x0) / grid.hx), 0), grid.nx - 1)
    j = min(max(int((p[1] - grid.y0) / grid.hy), 0), grid.ny - 1)
    return j * grid.nx + i


def region_at(grid: Grid2D, p) -> Region:
    return Region(int(grid.region_label[_nearest_node(grid, p)]))


def _in_box(grid: Grid2D, p, box) -> bool:
    xh, yh = grid.normalize(p)
    return box[0] <= xh <= box[1] and box[2] <= yh <= box[3]


def subregion_positions(grid: Grid2D, box) -> np.ndarray:
    """CORE node positions whose normalized coordinates fall in ``box``."""
    pts = grid.positions(Region.CORE)
    nrm = grid.normalize(pts)
    keep = ((nrm[:, 0] >= box[0]) & (nrm[:, 0] <= box[1])
            & (nrm[:, 1] >= box[2]) & (nrm[:, 1] <= box[3]))
    return pts[keep]


def triangle_angles(p1, p2, p3) -> np.ndarray:
    pts = [np.asarray(p, dtype=float) for p in (p1, p2, p3)]
    out = []
    for a in range(3):
        u = pts[(a + 1) % 3] - pts[a]
        v = pts[(a + 2) % 3] - pts[a]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            return np.zeros(3)
        out.append(math.atan2(abs(u[0] * v[1] - u[1] * v[0]), float(u @ v)))
    return np.array(out)


def non_collinear(points, tol: float = ANGLE_TOL) -> bool:
    """True when every interior angle of the triangle is at least ``tol`` radians."""
    if len(points) != 3:
        return True
    return bool(triangle_angles(*points).min() >= tol)


def sample_fixed_sensors(grid: Grid2D, n: int = 3, seed=0, max_attempts: int = 100) -> np.ndarray:
    """Distinct REFLECTOR node positions drawn uniformly, redrawn until non-collinear."""
    pool = grid.positions(Region.REFLECTOR)
    if len(pool) < n:
        raise ValueError(f"grid has {len(pool)} reflector nodes, need {n}")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        pick = pool[rng.choice(len(pool), size=n, replace=False)]
        if non_collinear(pick):
            return pick
    raise ValueError(f"no non-collinear sensor triple found in {max_attempts} attempts")


def sample_start_positions(grid: Grid2D, strategy: Strategy, n: int, seed=0) -> np.ndarray:
    box = DOWNCOMER if Strategy(strategy) is Strategy.MOBILE_SENSOR else BOTTOM
    pool = subregion_positions(grid, box)
    if len(pool) < n:
        raise ValueError("start subregion has too few nodes")
    rng = np.random.default_rng(seed)
    return pool[rng.choice(len(pool), size=n, replace=False)]


# ---------------------------------------------------------------------------
# point evaluation

def bilinear_weights(grid: Grid2D, p) -> tuple[np.ndarray, np.ndarray]:
    """Node indices and weights of the bilinear interpolant at ``p``.

    Positions closer to the wall than half a cell use the nearest row or
    column of nodes (constant extrapolation).
    """
    if not grid.contains(p):
        raise ValueError(f"position {tuple(p)} outside the domain")
    fx = (p[0] - grid.x0) / grid.hx - 0.5
    fy = (p[1] - grid.y0) / grid.hy - 0.5
    fx = min(max(fx, 0.0), grid.nx - 1.0)
    fy = min(max(fy, 0.0), grid.ny - 1.0)
    i0 = min(int(fx), grid.nx - 2)
    j0 = min(int(fy), grid.ny - 2)
    ax, ay = fx - i0, fy - j0
    idx = np.array([j0 * grid.nx + i0, j0 * grid.nx + i0 + 1,
                    (j0 + 1) * grid.nx + i0, (j0 + 1) * grid.nx + i0 + 1])
    w = np.array([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay])
    return idx, w


def interpolate(grid: Grid2D, values: np.ndarray, p):
    idx, w = bilinear_weights(grid, p)
    return w @ np.asarray(values)[idx]


def measure_point(values: np.ndarray, position, noise_sigma: float, rng,
                  grid: Grid2D) -> float:
    """Noisy point measurement ``(1 + eps) * field(position)`` with
    ``eps ~ N(0, noise_sigma**2)``; ``values`` is the rescaled field at one time."""
    exact = float(interpolate(grid, values, position))
    if noise_sigma == 0:
        return exact
    return exact * (1.0 + float(rng.normal(0.0, noise_sigma)))


# ---------------------------------------------------------------------------
# particle tracking

def _project(p, bounds):
    x0, x1, y0, y1 = bounds
    return np.array([min(max(p[0], x0), x1), min(max(p[1], y0), y1)])


def _inside(p, bounds) -> bool:
    x0, x1, y0, y1 = bounds
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def case_velocity(case: ParametricCase, grid: Grid2D):
    """Velocity callable interpolating the stored velocity fields at save times."""
    ux = case.fields[FieldId.VELOCITY_X]
    uy = case.fields[FieldId.VELOCITY_Y]

    def u(p, t):
        k = min(int(round(t / case.dt)), case.n_t - 1)
        idx, w = bilinear_weights(grid, p)
        return np.array([w @ ux[idx, k], w @ uy[idx, k]])

    return u


def track_particle(velocity, s0, dt: float, n_steps: int, bounds=None, t0: float = 0.0,
                   max_iter: int = 20, tol: float = 1e-10, grid: Grid2D | None = None):
    """Implicit-Euler particle path ``s_{n+1} = s_n + dt * u(s_{n+1}, t_{n+1})``.

    ``velocity`` is a callable ``u(position, t)`` or a case with stored
    velocity fields (then ``grid`` is required).  Each step is solved by
    fixed-point substitution; once the position change drops below ``tol``
    one more substitution polishes the iterate.  Non-convergence falls back
    to an explicit step.  A particle that leaves the domain is projected to
    the nearest boundary point and stays there.

    Returns ``(trajectory, stuck)`` of shapes ``(n_steps + 1, 2)`` and
    ``(n_steps + 1,)``.
    """
    if isinstance(velocity, ParametricCase):
        if grid is None:
            raise ValueError("a grid is needed to interpolate stored velocities")
        velocity = case_velocity(velocity, grid)
    if bounds is None:
        bounds = (grid.x0, grid.x1, grid.y0, grid.y1) if grid is not None else (
            -np.inf, np.inf, -np.inf, np.inf)
    traj = np.empty((n_steps + 1, 2))
    stuck = np.zeros(n_steps + 1, dtype=bool)
    s = np.asarray(s0, dtype=float).copy()
    traj[0] = s
    is_stuck = False
    for n in range(n_steps):
        if is_stuck:
            traj[n + 1] = s
            stuck[n + 1] = True
            continue
        t_next = t0 + (n + 1) * dt
        x = s.copy()
        converged = False
        left = False
        for _ in range(max_iter):
            x_new = s + dt * np.asarray(velocity(x, t_next))
            if not _inside(x_new, bounds):
                x, left = _project(x_new, bounds), True
                break
            change = np.max(np.abs(x_new - x))
            x = x_new
            if change < tol:
                converged = True
                break
        if converged:
            x_new = s + dt * np.asarray(velocity(x, t_next))
            if _inside(x_new, bounds):
                x = x_new
            else:
                x, left = _project(x_new, bounds), True
        elif not left:
            log.warning("implicit step %d did not converge; taking an explicit step", n)
            x = s + dt * np.asarray(velocity(s, t_next - dt))
            if not _inside(x, bounds):
                x, left = _project(x, bounds), True
        s = x
        is_stuck = left
        traj[n + 1] = s
        stuck[n + 1] = is_stuck
    return traj, stuck


# ---------------------------------------------------------------------------
# measurement series

def _case_rng(sensors: SensorConfig, tau: float):
    return np.random.default_rng([int(sensors.seed), int(round(tau * 1e6))])


def build_measurements(case: ParametricCase, sensors: SensorConfig, grid: Grid2D,
                       ref: tuple[float, float] | None = None) -> MeasurementSeries:
    """Input series for one case.

    ``ref`` holds the reference extrema used to rescale the measured field;
    trajectories are normalized to ``[0, 1]`` by the domain bounds and carry
    no noise.
    """
    from .compression import rescale

    rng = _case_rng(sensors, case.tau)
    n_t = case.n_t
    sigma = sensors.noise_sigma
    if sensors.strategy is Strategy.FIXED_OUTCORE:
        X = rescale(case.fields[sensors.measured_field], *ref)
        rows = []
        for p in sensors.positions:
            idx, w = bilinear_weights(grid, p)
            rows.append(w @ X[idx, :])
        vals = np.array(rows)
        if sigma > 0:
            vals = vals * (1.0 + rng.normal(0.0, sigma, size=vals.shape))
        return MeasurementSeries(vals, None, sensors.strategy, case.dt)

    bounds = (grid.x0, grid.x1, grid.y0, grid.y1)
    paths, flags = [], []
    for p in sensors.positions:
        traj, stuck = track_particle(case, p, case.dt, n_t - 1, bounds, grid=grid)
        paths.append(grid.normalize(traj))
        flags.append(stuck)
    flags = np.array(flags)
    if sensors.strategy is Strategy.MOBILE_PROBES:
        vals = np.vstack([path.T for path in paths])
        return MeasurementSeries(vals, flags, sensors.strategy, case.dt)

    X = rescale(case.fields[sensors.measured_field], *ref)
    lo = np.array([grid.x0, grid.y0])
    span = np.array([grid.x1 - grid.x0, grid.y1 - grid.y0])
    pos = paths[0] * span + lo
    reading = np.empty(n_t)
    for k in range(n_t):
        idx, w = bilinear_weights(grid, pos[k])
        reading[k] = w @ X[idx, k]
    if sigma > 0:
        reading = reading * (1.0 + rng.normal(0.0, sigma, size=n_t))
    vals = np.vstack([reading, paths[0].T])
    return MeasurementSeries(vals, flags, sensors.strategy, case.dt)


def probe_velocities(series: MeasurementSeries) -> MeasurementSeries:
    """Backward-difference velocities of position rows (zero at the first
    sample and for stuck particles), in normalized units per second."""
    v = series.values
    vel = np.zeros_like(v)
    vel[:, 1:] = np.diff(v, axis=1) / series.dt
    return MeasurementSeries(vel, series.stuck_flags, series.strategy, series.dt)


def lag_series(series, K: int) -> LaggedWindows:
    """Sliding windows of length ``K + 1``, front-padded by repeating ``y_0``."""
    if K < 1:
        raise ValueError("lag must be at least 1")
    Y = series.values if isinstance(series, MeasurementSeries) else np.asarray(series, dtype=float)
    Y = Y.T  # N_t x s
    padded = np.vstack([np.repeat(Y[:1], K, axis=0), Y])
    win = np.lib.stride_tricks.sliding_window_view(padded, K + 1, axis=0)
    return LaggedWindows(np.ascontiguousarray(win.transpose(0, 2, 1)), K)


# ---------------------------------------------------------------------------
# CSV exchange

def measurements_to_csv(series: MeasurementSeries, sensor_id: str, strategy, sigma: float,
                        seed, provenance: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# sensor_id={sensor_id}\n# strategy={Strategy(strategy).value}\n")
    buf.write(f"# sigma={sigma!r}\n# seed={seed}\n")
    if provenance:
        buf.write(f"# {provenance}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"y_{i + 1}" for i in range(series.s)])
    for k in range(series.n_t):
        w.writerow([repr(k * series.dt)] + [repr(float(v)) for v in series.values[:, k]])
    return buf.getvalue()


def write_measurements_csv(series: MeasurementSeries, path, sensor_id: str, strategy,
                           sigma: float, seed, provenance: str = "") -> None:
    text = measurements_to_csv(series, sensor_id, strategy, sigma, seed, provenance)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_measurements_csv(path) -> tuple[MeasurementSeries, dict]:
    meta, rows = {}, []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if _:
                meta[key] = val
        else:
            body.append(line)
    reader = csv.reader(body)
    next(reader)
    for row in reader:
        rows.append([float(v) for v in row])
    arr = np.array(rows)
    dt = arr[1, 0] - arr[0, 0] if len(arr) > 1 else 1.0
    strategy = Strategy(meta["strategy"]) if "strategy" in meta else None
    return MeasurementSeries(arr[:, 1:].T, None, strategy, dt), meta
