"""Workspace-backed experiment stages: generate, compress, train, reconstruct,
evaluate and sweep."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import compression as cmp
from .config import config_hash, dump_config, experiment_hash, surrogate_config
from .core import (ALL_FIELDS, FieldId, Grid2D, ParametricDataset, Region, Split,
                   atomic_write_bytes, read_snapshot_file, write_snapshot_file)
from .ensemble import ensemble_predict, sample_configurations, sensitivity_sweep, sweep_csv
from .metrics import (REPORT_FIELDS, contour_csv, core_weights, emit_report, field_error,
                      latent_error, latent_trajectory_csv, spatial_average_csv)
from .sensing import (SensorConfig, Strategy, build_measurements, lag_series,
                      probe_velocities, sample_start_positions)
from .shred import (TrainConfig, history_csv, init_model, predict, read_model_file, train,
                    window_inputs, write_model_file)
from .surrogate import generate_dataset

log = logging.getLogger(__name__)

STAGES = ("generate", "compress", "train", "reconstruct", "evaluate", "sweep")
CHOOSE = {Strategy.FIXED_OUTCORE: 3, Strategy.MOBILE_SENSOR: 1, Strategy.MOBILE_PROBES: 3}
POOL_KEY = {Strategy.FIXED_OUTCORE: "pool_fixed", Strategy.MOBILE_SENSOR: "pool_mobile_sensor",
            Strategy.MOBILE_PROBES: "pool_probes"}
STRATEGY_INDEX = {s: i for i, s in enumerate(Strategy)}


class MissingArtifactError(RuntimeError):
    def __init__(self, what: str, stage: str):
        super().__init__(f"missing {what}; run the `{stage}` subcommand first")
        self.stage = stage


class Workspace:
    """Directory layout of one experiment.

    Data, bases and members live under ``exp-<hash>``, where the hash covers
    every setting that shapes them; reports go to ``reports/run-<hash>`` keyed
    by the full configuration.  Existing artifacts are reused, never rewritten.
    """

    def __init__(self, root, cfg: dict):
        self.cfg = cfg
        self.seed = cfg["run"]["seed"]
        self.exp_hash = experiment_hash(cfg)
        self.run_hash = config_hash(cfg)
        self.dir = Path(root) / f"exp-{self.exp_hash}"
        self.data = self.dir / "data"
        self.bases = self.dir / "bases"
        self.models = self.dir / "models"
        self.preds = self.dir / "predictions"
        self.reports = self.dir / "reports" / f"run-{self.run_hash}"

    def provenance(self) -> str:
        return f"config_hash={self.exp_hash}\nseed={self.seed}\n"

    def ensure(self, path: Path) -> Path:
        path.mkdir(parents=True, exist_ok=True)
        prov = path / "provenance.txt"
        if not prov.exists():
            atomic_write_bytes(prov, self.provenance().encode())
        return path

    def write_config(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / "config.ini"
        if not path.exists():
            atomic_write_bytes(path, dump_config(self.cfg).encode())


# ---------------------------------------------------------------------------
# generate

def _manifest_text(ds: ParametricDataset, ws: Workspace) -> str:
    g = ds.grid
    lines = [f"config_hash = {ws.exp_hash}", f"seed = {ws.seed}",
             f"grid = {g.nx} {g.ny} {g.x0!r} {g.x1!r} {g.y0!r} {g.y1!r}",
             f"reflector_thickness = {ws.cfg['surrogate']['reflector_thickness']!r}",
             f"dt = {ds.dt!r}", f"n_t = {ds.n_t}",
             "tau = " + " ".join(repr(c.tau) for c in ds.cases),
             "split = " + " ".join(s.value for s in ds.split)]
    return "\n".join(lines) + "\n"


def stage_generate(ws: Workspace, jobs: int = 1) -> None:
    ws.write_config()
    if (ws.data / "manifest.txt").exists():
        log.info("dataset present in %s", ws.data)
        return
    t0 = time.time()
    ds = generate_dataset(surrogate_config(ws.cfg), jobs=jobs)
    ws.ensure(ws.data)
    for i, case in enumerate(ds.cases):
        write_snapshot_file(case, ws.data / f"case_{i:02d}.snap")
    atomic_write_bytes(ws.data / "manifest.txt", _manifest_text(ds, ws).encode())
    log.info("generated %d cases in %.1f s", len(ds.cases), time.time() - t0)


_DATASETS: dict = {}


def load_dataset(ws: Workspace) -> ParametricDataset:
    key = str(ws.data)
    if key in _DATASETS:
        return _DATASETS[key]
    path = ws.data / "manifest.txt"
    if not path.exists():
        raise MissingArtifactError("snapshot data", "generate")
    meta = dict(line.split(" = ", 1) for line in path.read_text().splitlines() if line)
    nx, ny, x0, x1, y0, y1 = meta["grid"].split()
    grid = Grid2D.with_reflector(int(nx), int(ny), float(meta["reflector_thickness"]),
                                 float(x0), float(x1), float(y0), float(y1))
    splits = meta["split"].split()
    cases = [read_snapshot_file(ws.data / f"case_{i:02d}.snap") for i in range(len(splits))]
    ds = ParametricDataset(grid, cases, splits, int(meta["seed"]))
    _DATASETS.clear()
    _DATASETS[key] = ds
    return ds


# ---------------------------------------------------------------------------
# compress

def stage_compress(ws: Workspace) -> None:
    ds = load_dataset(ws)
    if all((ws.bases / f"{f.value}.base").exists() for f in ds.fields):
        return
    c = ws.cfg["compression"]
    bases = cmp.compress_dataset(ds, c["method"], c["energy_tol"], c["r_cap"], c["oversample"],
                                 c["power_iters"], ws.seed)
    ws.ensure(ws.bases)
    for fid, basis in bases.items():
        cmp.write_basis_file(basis, ws.bases / f"{fid.value}.base")
    log.info("ranks: %s", {f.value: b.rank for f, b in bases.items()})


def load_bases(ws: Workspace) -> dict:
    bases = {}
    for fid in ALL_FIELDS:
        path = ws.bases / f"{fid.value}.base"
        if not path.exists():
            raise MissingArtifactError("SVD bases", "compress")
        bases[fid] = cmp.read_basis_file(path)
    return bases


# ---------------------------------------------------------------------------
# sensors and members

def sensor_pool(grid: Grid2D, strategy: Strategy, size: int, seed: int) -> np.ndarray:
    rng_seed = [int(seed), 101, STRATEGY_INDEX[strategy]]
    if strategy is Strategy.FIXED_OUTCORE:
        pool = grid.positions(Region.REFLECTOR)
        pick = np.random.default_rng(rng_seed).choice(len(pool), size=size, replace=False)
        return pool[np.sort(pick)]
    return sample_start_positions(grid, strategy, size, rng_seed)


def member_configs(ws: Workspace, strategy: Strategy, n: int) -> list:
    ds = load_dataset(ws)
    s = ws.cfg["sensing"]
    pool = sensor_pool(ds.grid, strategy, s[POOL_KEY[strategy]], ws.seed)
    seed = int(np.random.SeedSequence([ws.seed, 202, STRATEGY_INDEX[strategy]]).generate_state(1)[0])
    return sample_configurations(pool, CHOOSE[strategy], n, seed, strategy, s["noise_sigma"])


def _ref(bases, sensors: SensorConfig):
    if sensors.measured_field is None:
        return None
    b = bases[sensors.measured_field]
    return b.ref_min, b.ref_max


def model_series(cfg: dict, case, sensors: SensorConfig, grid: Grid2D, bases):
    """Measurements as fed to the network: probe positions become velocities
    when ``[sensing] probe_input = velocity``."""
    series = build_measurements(case, sensors, grid, _ref(bases, sensors))
    if sensors.strategy is Strategy.MOBILE_PROBES and cfg["sensing"]["probe_input"] == "velocity":
        series = probe_velocities(series)
    return series


def _split_data(ws, ds, bases, sensors, split, model_K, use_tau):
    W, Y = [], []
    for case in ds.cases_in(split):
        series = model_series(ws.cfg, case, sensors, ds.grid, bases)
        win = lag_series(series, model_K).windows
        if use_tau:
            win = np.concatenate([win, np.full(win.shape[:2] + (1,), case.tau)], axis=2)
        W.append(win)
        Y.append(cmp.encode_case(bases, case).coeffs.T)
    return np.concatenate(W), np.concatenate(Y)


def _noise_channels(sensors: SensorConfig, use_tau: bool) -> np.ndarray:
    sigma = sensors.noise_sigma
    if sensors.strategy is Strategy.FIXED_OUTCORE:
        ch = [sigma] * 3
    elif sensors.strategy is Strategy.MOBILE_SENSOR:
        ch = [sigma, 0.0, 0.0]
    else:
        ch = [0.0] * 6
    return np.array(ch + [0.0] * int(use_tau))


def _member_path(ws: Workspace, strategy: Strategy, l: int) -> Path:
    return ws.models / strategy.value / f"member_{l:03d}.model"


def _sensor_line(l: int, sc: SensorConfig) -> str:
    pos = " ".join(f"{x!r} {y!r}" for x, y in sc.positions)
    field = sc.measured_field.value if sc.measured_field is not None else "-"
    return f"{l} {sc.strategy.value} {field} {sc.noise_sigma!r} {sc.seed} {pos}\n"


def train_member(root: str, cfg: dict, strategy: str, l: int) -> str:
    """Train member ``l`` of one strategy unless its checkpoint exists."""
    ws = Workspace(root, cfg)
    strategy = Strategy(strategy)
    path = _member_path(ws, strategy, l)
    if path.exists():
        return str(path)
    ds = load_dataset(ws)
    bases = load_bases(ws)
    sensors = member_configs(ws, strategy, l + 1)[l]
    tcfg = ws.cfg["train"]
    K = ws.cfg["sensing"]["lag"]
    use_tau = tcfg["use_tau"]
    augment = ws.cfg["sensing"]["noise_augmentation"]
    clean = SensorConfig(sensors.strategy, sensors.positions, sensors.measured_field, 0.0,
                         sensors.seed) if augment else sensors
    t0 = time.time()
    tr = _split_data(ws, ds, bases, clean, Split.TRAIN, K, use_tau)
    va = _split_data(ws, ds, bases, sensors, Split.VALIDATION, K, use_tau)
    s = 6 if strategy is Strategy.MOBILE_PROBES else 3
    model = init_model(s, K, tr[1].shape[1], seed=sensors.seed, dropout=tcfg["dropout"],
                       use_tau=use_tau)
    config = TrainConfig(tcfg["lr"], tcfg["batch_size"], tcfg["max_epochs"], tcfg["patience"],
                         tcfg["clip"], sensors.seed)
    noise = _noise_channels(sensors, use_tau) if augment else 0.0
    standardize = tcfg["standardize_probe_inputs" if strategy is Strategy.MOBILE_PROBES
                       else "standardize_inputs"]
    model, history = train(model, tr, va, config, standardize, noise)
    out = ws.ensure(path.parent)
    atomic_write_bytes(out / f"member_{l:03d}_history.csv", history_csv(history).encode())
    atomic_write_bytes(out / f"member_{l:03d}_sensors.txt", _sensor_line(l, sensors).encode())
    write_model_file(model, path)
    log.info("%s member %d: %d epochs, best val %.4g, %.0f s", strategy.value, l, len(history),
             min(h[2] for h in history), time.time() - t0)
    return str(path)


def _run_jobs(fn, arglist, jobs: int):
    if jobs > 1 and len(arglist) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(fn, *args) for args in arglist]
            return [f.result() for f in futures]
    return [fn(*args) for args in arglist]


def ensure_members(ws: Workspace, root, strategy: Strategy, n: int, jobs: int = 1) -> None:
    load_bases(ws)
    todo = [(str(root), ws.cfg, strategy.value, l) for l in range(n)
            if not _member_path(ws, strategy, l).exists()]
    _run_jobs(train_member, todo, jobs)


def stage_train(ws: Workspace, root, jobs: int = 1) -> None:
    for name in ws.cfg["ensemble"]["strategies"]:
        ensure_members(ws, root, Strategy(name), ws.cfg["ensemble"]["L"], jobs)


# ---------------------------------------------------------------------------
# reconstruct

def _pred_path(ws: Workspace, strategy: Strategy, l: int) -> Path:
    return ws.preds / strategy.value / f"member_{l:03d}.npz"


def predict_member(root: str, cfg: dict, strategy: str, l: int) -> str:
    """Latent predictions of member ``l`` for every VALIDATION and TEST case."""
    ws = Workspace(root, cfg)
    strategy = Strategy(strategy)
    out = _pred_path(ws, strategy, l)
    if out.exists():
        return str(out)
    mpath = _member_path(ws, strategy, l)
    if not mpath.exists():
        raise MissingArtifactError(f"trained model {mpath.name} for {strategy.value}", "train")
    model = read_model_file(mpath)
    ds = load_dataset(ws)
    bases = load_bases(ws)
    sensors = member_configs(ws, strategy, l + 1)[l]
    arrays = {}
    for split in (Split.VALIDATION, Split.TEST):
        for j, case in enumerate(ds.cases_in(split)):
            series = model_series(ws.cfg, case, sensors, ds.grid, bases)
            win = window_inputs(model, series, case.tau)
            arrays[f"{split.value}_{j}"] = predict(model, win).T
    ws.ensure(out.parent)
    tmp = out.with_name(out.stem + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(out)
    return str(out)


def ensure_predictions(ws: Workspace, root, strategy: Strategy, n: int, jobs: int = 1) -> None:
    for l in range(n):
        if not _member_path(ws, strategy, l).exists():
            raise MissingArtifactError(f"trained members for {strategy.value}", "train")
    todo = [(str(root), ws.cfg, strategy.value, l) for l in range(n)
            if not _pred_path(ws, strategy, l).exists()]
    _run_jobs(predict_member, todo, jobs)


def stage_reconstruct(ws: Workspace, root, jobs: int = 1) -> None:
    for name in ws.cfg["ensemble"]["strategies"]:
        ensure_predictions(ws, root, Strategy(name), ws.cfg["ensemble"]["L"], jobs)


def load_predictions(ws: Workspace, strategy: Strategy, n: int, split: Split) -> list:
    """``out[l][j]``: member ``l``'s latent prediction for case ``j`` of ``split``."""
    load_dataset(ws)
    load_bases(ws)
    out = []
    for l in range(n):
        path = _pred_path(ws, strategy, l)
        if not path.exists():
            if not _member_path(ws, strategy, l).exists():
                raise MissingArtifactError(f"trained members for {strategy.value}", "train")
            raise MissingArtifactError(f"predictions for {strategy.value}", "reconstruct")
        with np.load(path) as z:
            keys = sorted((k for k in z.files if k.startswith(split.value + "_")),
                          key=lambda k: int(k.rsplit("_", 1)[1]))
            out.append([z[k] for k in keys])
    return out


# ---------------------------------------------------------------------------
# evaluate

def _physical_average_rows(basis: cmp.SVDBasis, w: np.ndarray) -> np.ndarray:
    """Linear map from latent coefficients to the physical CORE average."""
    return (basis.ref_max - basis.ref_min) * (w @ basis.U)


def evaluate_strategy(ws: Workspace, strategy: Strategy, L: int):
    ds = load_dataset(ws)
    bases = load_bases(ws)
    offsets = cmp.field_offsets(bases)
    members = load_predictions(ws, strategy, L, Split.TEST)
    ens = ensemble_predict(members)
    cases = ds.cases_in(Split.TEST)
    truths = [cmp.encode_case(bases, c) for c in cases]
    preds = [cmp.LatentSeries(m, offsets, c.tau) for m, c in zip(ens.mean, cases)]
    recon = [cmp.decode_latent(bases, p) for p in preds]
    summary = {"latent_error": latent_error(preds, truths), "xi": ens.xi}
    for f in REPORT_FIELDS:
        summary[f] = field_error(recon, cases, f)
    times = cases[0].times
    traj = latent_trajectory_csv([c.tau for c in cases], times,
                                 [t.coeffs for t in truths], ens.mean, ens.sample_std, offsets)
    w = core_weights(ds.grid)
    records = []
    for j, case in enumerate(cases):
        for fid in (FieldId.TEMPERATURE, FieldId.FLUX, FieldId.PRECURSOR):
            b = bases[fid]
            start, length = offsets[fid]
            row = _physical_average_rows(b, w)
            member_avg = np.array([b.ref_min + row @ m[j][start:start + length]
                                   for m in members])
            xi = member_avg.std(axis=0, ddof=1) / np.sqrt(L)
            truth_avg = w @ case.fields[fid]
            records.append((case.tau, fid.value, times, truth_avg, member_avg.mean(axis=0), xi))
    avg = spatial_average_csv(records)
    crecords = []
    case = cases[0]
    for k in ws.cfg["report"]["contour_steps"]:
        if not 0 <= k < case.n_t:
            continue
        for fid in ALL_FIELDS:
            b = bases[fid]
            start, length = offsets[fid]
            fields = np.array([cmp.decode(b, m[0][start:start + length, k:k + 1])[:, 0]
                               for m in members])
            crecords.append((case.tau, times[k], fid.value, case.fields[fid][:, k],
                             fields.mean(axis=0), fields.std(axis=0, ddof=1)))
    cont = contour_csv(ds.grid, crecords)
    return summary, traj, avg, cont


def stage_evaluate(ws: Workspace) -> list:
    L = ws.cfg["ensemble"]["L"]
    summary, trajs, avgs, conts = {}, {}, {}, {}
    for name in ws.cfg["ensemble"]["strategies"]:
        strategy = Strategy(name)
        summary[name], trajs[name], avgs[name], conts[name] = evaluate_strategy(ws, strategy, L)
    errors = {s: {f: v[f] for f in REPORT_FIELDS} for s, v in summary.items()}
    ws.ensure(ws.reports)
    return emit_report(ws.reports, errors, summary, trajs, avgs, None, conts)


# ---------------------------------------------------------------------------
# sweep

def stage_sweep(ws: Workspace, root, jobs: int = 1) -> Path:
    """Sensitivity of xi to the member count, on the VALIDATION cases."""
    strategy = Strategy.FIXED_OUTCORE
    L_values = ws.cfg["ensemble"]["sweep_L"]
    n = max(L_values)
    ensure_members(ws, root, strategy, n, jobs)
    ensure_predictions(ws, root, strategy, n, jobs)
    members = load_predictions(ws, strategy, n, Split.VALIDATION)
    rows = sensitivity_sweep(lambda l: members[l], L_values)
    ws.ensure(ws.reports)
    path = ws.reports / "table1_sensitivity.csv"
    atomic_write_bytes(path, sweep_csv(rows).encode())
    return path


def run_all(ws: Workspace, root, jobs: int = 1) -> list:
    stage_generate(ws, jobs)
    stage_compress(ws)
    stage_train(ws, root, jobs)
    stage_reconstruct(ws, root, jobs)
    return stage_evaluate(ws)
