"""Error metrics, spatial averages and CSV report emission."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .core import FieldId, Grid2D, ParametricCase, Region, atomic_write_bytes

# rows of the strategy comparison table; velocity is the stacked (x, y) pair
REPORT_FIELDS = ("VELOCITY", "TEMPERATURE", "FLUX", "PRECURSOR")
STRATEGY_COLUMNS = ("FIXED_OUTCORE", "MOBILE_SENSOR", "MOBILE_PROBES")


def relative_column_error(pred, truth) -> float:
    """Mean over columns of ``||pred_j - truth_j|| / ||truth_j||``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if truth.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    norms = np.linalg.norm(truth, axis=0)
    if np.any(norms == 0):
        raise ValueError("zero-norm truth column")
    return float(np.mean(np.linalg.norm(pred - truth, axis=0) / norms))


def _coeffs(v):
    return v.coeffs if hasattr(v, "coeffs") else np.asarray(v, dtype=float)


def latent_error(preds, truths) -> float:
    """Mean over cases of the time-averaged relative latent error."""
    if len(preds) != len(truths) or not preds:
        raise ValueError("need matching, non-empty lists of cases")
    return float(np.mean([relative_column_error(_coeffs(p), _coeffs(t))
                          for p, t in zip(preds, truths)]))


def field_matrix(fields, name) -> np.ndarray:
    """Snapshot matrix of one report field; ``VELOCITY`` stacks both components."""
    if isinstance(fields, ParametricCase):
        fields = fields.fields
    if str(getattr(name, "value", name)) == "VELOCITY":
        return np.vstack([fields[FieldId.VELOCITY_X], fields[FieldId.VELOCITY_Y]])
    return np.asarray(fields[FieldId(name)])


def field_error(preds, truths, field) -> float:
    """Relative error of one field in physical units, averaged over time and cases.

    ``preds`` and ``truths`` are lists of per-case field dicts (or cases).
    """
    if len(preds) != len(truths) or not preds:
        raise ValueError("need matching, non-empty lists of cases")
    return float(np.mean([relative_column_error(field_matrix(p, field), field_matrix(t, field))
                          for p, t in zip(preds, truths)]))


def core_weights(grid: Grid2D) -> np.ndarray:
    w = grid.area_weights() * (grid.region_label == Region.CORE)
    return w / w.sum()


def spatial_average_series(fields, field, grid: Grid2D) -> np.ndarray:
    """Area-weighted CORE mean of a field at every time step."""
    X = field_matrix(fields, field)
    w = core_weights(grid)
    if X.shape[0] != w.size:
        X = X.reshape(-1, w.size, X.shape[1]).mean(axis=0) if X.shape[0] % w.size == 0 else X
    return w @ X


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(x) -> str:
    return f"{float(x):.9e}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def strategy_table_csv(errors: dict) -> str:
    """Rows per report field, one column per strategy; ``errors[strategy][field]``."""
    cols = [s for s in STRATEGY_COLUMNS if s in errors]
    rows = [[f] + [float(errors[s][f]) for s in cols] for f in REPORT_FIELDS]
    return _csv_text(["field"] + cols, rows)


def latent_trajectory_csv(taus, times, truths, means, stds, offsets) -> str:
    """Truth, ensemble mean and mean +- 2 std per mode."""
    names = {}
    for fid, (start, length) in offsets.items():
        for k in range(length):
            names[start + k] = (getattr(fid, "value", fid), k + 1)
    rows = []
    for tau, truth, mean, std in zip(taus, truths, means, stds):
        for i in range(mean.shape[0]):
            fname, mode = names.get(i, ("", i + 1))
            for k, t in enumerate(times):
                rows.append([float(tau), fname, mode, float(t), float(truth[i, k]),
                             float(mean[i, k]), float(mean[i, k] - 2 * std[i, k]),
                             float(mean[i, k] + 2 * std[i, k])])
    return _csv_text(["tau", "field", "mode", "t", "truth", "mean", "lower", "upper"], rows)


def spatial_average_csv(records) -> str:
    """``records``: iterable of ``(tau, field, times, truth, mean, xi)``; bands are
    ``mean +- 1.96 xi``."""
    rows = []
    for tau, field, times, truth, mean, xi in records:
        for k, t in enumerate(times):
            rows.append([float(tau), field, float(t), float(truth[k]), float(mean[k]),
                         float(mean[k] - 1.96 * xi[k]), float(mean[k] + 1.96 * xi[k])])
    return _csv_text(["tau", "field", "t", "truth", "mean", "lower95", "upper95"], rows)


def contour_csv(grid: Grid2D, records) -> str:
    """``records``: iterable of ``(tau, t, field, truth, mean, std)`` node vectors."""
    x, y = grid.node_coordinates()
    rows = []
    for tau, t, field, truth, mean, std in records:
        for n in range(grid.n_nodes):
            rows.append([float(tau), float(t), field, n, float(x[n]), float(y[n]),
                         float(truth[n]), float(mean[n]), float(std[n])])
    return _csv_text(["tau", "t", "field", "node", "x", "y", "truth", "mean", "std"], rows)


def summary_csv(summary: dict) -> str:
    """``summary[strategy] = {"latent_error": e, "xi": xi, FIELD: eps, ...}``."""
    keys = ["latent_error", "xi"] + list(REPORT_FIELDS)
    rows = [[s] + [float(summary[s][k]) for k in keys] for s in summary]
    return _csv_text(["strategy"] + keys, rows)


def emit_report(out_dir, field_errors: dict, summary: dict | None = None,
                trajectories: dict | None = None, averages: dict | None = None,
                sweep_rows=None, contours: dict | None = None) -> list:
    """Write every report CSV into ``out_dir``; returns the written paths.

    Each mapping is keyed by strategy name and holds CSV text produced by the
    helpers above.  ``field_errors`` must be non-empty.
    """
    if not field_errors:
        raise ValueError("no test-split errors to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"table2_field_errors.csv": strategy_table_csv(field_errors)}
    if summary:
        files["summary.csv"] = summary_csv(summary)
    for name, group in (("latent_trajectories", trajectories), ("spatial_averages", averages),
                        ("contours", contours)):
        for strategy, text in (group or {}).items():
            files[f"{name}_{strategy}.csv"] = text
    if sweep_rows is not None:
        from .ensemble import sweep_csv
        files["table1_sensitivity.csv"] = sweep_csv(sweep_rows)
    written = []
    for name in sorted(files):
        path = out / name
        atomic_write_bytes(path, files[name].encode("utf-8"))
        written.append(path)
    return written
