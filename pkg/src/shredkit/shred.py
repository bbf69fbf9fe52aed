"""Shallow recurrent decoder: a stacked LSTM encoder over lagged sensor windows
followed by a small dense decoder, with hand-written gradients and Adam."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import _pack_string, atomic_write_bytes, read_header
from .sensing import MeasurementSeries, lag_series

log = logging.getLogger(__name__)

HIDDEN = 64
N_LAYERS = 2
DECODER = (350, 400)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 1000
    patience: int = 50
    clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.clip <= 0:
            raise ValueError("training settings must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")


@dataclass(eq=False)
class ShredModel:
    """Parameters plus the normalization statistics needed at inference.

    ``params`` is ordered: per LSTM layer ``W_ih (in, 4H)``, ``W_hh (H, 4H)``,
    ``b (4H,)`` with gate blocks ordered input, forget, cell, output; then the
    decoder ``W1, b1, W2, b2, W3, b3``.
    """

    s: int
    K: int
    r_total: int
    params: dict
    hidden: int = HIDDEN
    decoder: tuple = DECODER
    dropout: float = 0.1
    seed: int = 0
    use_tau: bool = False
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None

    def __post_init__(self):
        if self.y_mean is None:
            self.y_mean = np.zeros(self.r_total)
            self.y_std = np.ones(self.r_total)
        n_in = self.n_in
        if self.x_mean is None:
            self.x_mean = np.zeros(n_in)
            self.x_std = np.ones(n_in)
        for name, shape in param_shapes(n_in, self.r_total, self.hidden, self.decoder).items():
            p = self.params.get(name)
            if p is None or p.shape != shape:
                raise ValueError(f"parameter {name} must have shape {shape}")
            if not np.isfinite(p).all():
                raise ValueError(f"parameter {name} is not finite")

    @property
    def n_in(self) -> int:
        return self.s + int(self.use_tau)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ShredModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def param_shapes(n_in: int, r_total: int, hidden: int = HIDDEN, decoder=DECODER) -> dict:
    shapes = {}
    d = n_in
    for layer in range(N_LAYERS):
        shapes[f"lstm{layer}.W_ih"] = (d, 4 * hidden)
        shapes[f"lstm{layer}.W_hh"] = (hidden, 4 * hidden)
        shapes[f"lstm{layer}.b"] = (4 * hidden,)
        d = hidden
    sizes = (hidden,) + tuple(decoder) + (r_total,)
    for k in range(len(sizes) - 1):
        shapes[f"dec.W{k + 1}"] = (sizes[k], sizes[k + 1])
        shapes[f"dec.b{k + 1}"] = (sizes[k + 1],)
    return shapes


def init_model(s: int, K: int, r_total: int, seed=0, dropout: float = 0.1,
               use_tau: bool = False, hidden: int = HIDDEN, decoder=DECODER) -> ShredModel:
    """Uniform ``+-1/sqrt(fan_in)`` weights, forget-gate bias 1."""
    if s not in (3, 6):
        raise ValueError(f"input dimension must be 3 or 6, got {s}")
    if r_total < 1 or K < 1:
        raise ValueError("need r_total >= 1 and K >= 1")
    if not 0 <= dropout < 1:
        raise ValueError("dropout must be in [0, 1)")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(s + int(use_tau), r_total, hidden, decoder).items():
        if name.startswith("lstm"):
            fan_in = shape[0] if name.endswith("W_ih") else hidden
        else:
            fan_in = shape[0] if len(shape) == 2 else None
            if fan_in is None:
                fan_in = params[name.replace(".b", ".W")].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
        if name.startswith("lstm") and name.endswith(".b"):
            params[name][hidden:2 * hidden] = 1.0
    return ShredModel(s, K, r_total, params, hidden, tuple(decoder), dropout, seed, use_tau)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(arr, tag):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in layer {tag}")


def forward(model: ShredModel, windows, train: bool = False, rng=None, cache: bool = False):
    """Standardized latent prediction for a batch ``(B, K+1, n_in)`` or one window.

    Inputs are normalized with the model's input statistics.  With
    ``train=True`` inverted dropout masks are drawn from ``rng``.
    """
    x = np.asarray(windows, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.n_in:
        raise ValueError(f"windows must be (B, T, {model.n_in}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("window contains non-finite values")
    P = model.params
    H = model.hidden
    B, T, _ = x.shape
    inp = (x - model.x_mean) / model.x_std
    layers = []
    for layer in range(N_LAYERS):
        W, U, b = P[f"lstm{layer}.W_ih"], P[f"lstm{layer}.W_hh"], P[f"lstm{layer}.b"]
        xz = inp @ W + b  # B, T, 4H
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.empty((B, T, H))
        gates = np.empty((B, T, 4 * H))
        cs = np.empty((B, T, H))
        for t in range(T):
            z = xz[:, t] + h @ U
            g = np.empty_like(z)
            g[:, :2 * H] = _sigmoid(z[:, :2 * H])
            g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
            g[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
            c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
            h = g[:, 3 * H:] * np.tanh(c)
            gates[:, t] = g
            cs[:, t] = c
            hs[:, t] = h
        _check(hs, f"lstm{layer}")
        layers.append((inp, gates, cs, hs))
        inp = hs
    a = inp[:, -1]
    dense = []
    n_dense = len(model.decoder) + 1
    for k in range(1, n_dense + 1):
        z = a @ P[f"dec.W{k}"] + P[f"dec.b{k}"]
        mask = None
        if k < n_dense:
            out = np.maximum(z, 0.0)
            if train and model.dropout > 0:
                keep = 1.0 - model.dropout
                mask = (rng.random(out.shape) < keep) / keep
                out = out * mask
        else:
            out = z
        _check(out, f"dec{k}")
        dense.append((a, z, mask))
        a = out
    y = a[0] if single else a
    if cache:
        return y, (layers, dense)
    return y


def loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    return float(np.mean((pred - target) ** 2))


def backward(model: ShredModel, windows, targets, train: bool = False, rng=None):
    """Mean batch MSE and its exact gradient with respect to every parameter."""
    windows = np.asarray(windows, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError("backward needs a non-empty batch of windows")
    pred, (layers, dense) = forward(model, windows, train=train, rng=rng, cache=True)
    if targets.shape != pred.shape:
        raise ValueError("target shape does not match prediction")
    P = model.params
    H = model.hidden
    diff = pred - targets
    value = float(np.mean(diff ** 2))
    grads = {}
    da = 2.0 * diff / diff.size
    n_dense = len(dense)
    for k in range(n_dense, 0, -1):
        a_in, z, mask = dense[k - 1]
        if k < n_dense:
            if mask is not None:
                da = da * mask
            da = da * (z > 0)
        grads[f"dec.W{k}"] = a_in.T @ da
        grads[f"dec.b{k}"] = da.sum(axis=0)
        da = da @ P[f"dec.W{k}"].T
        _check(da, f"dec{k}")
    dh_top = da  # gradient wrt final top-layer hidden state
    B, T = windows.shape[:2]
    dhs = np.zeros((B, T, H))
    dhs[:, -1] = dh_top
    for layer in range(N_LAYERS - 1, -1, -1):
        inp, gates, cs, hs = layers[layer]
        U = P[f"lstm{layer}.W_hh"]
        dZ = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = gates[:, t]
            i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tc = np.tanh(cs[:, t])
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc ** 2)
            c_prev = cs[:, t - 1] if t > 0 else 0.0
            dz = dZ[:, t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg ** 2)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ U.T
        _check(dZ, f"lstm{layer}")
        flat = dZ.reshape(B * T, 4 * H)
        grads[f"lstm{layer}.W_ih"] = inp.reshape(B * T, -1).T @ flat
        h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
        grads[f"lstm{layer}.W_hh"] = h_prev.reshape(B * T, H).T @ flat
        grads[f"lstm{layer}.b"] = flat.sum(axis=0)
        dhs = dZ @ P[f"lstm{layer}.W_ih"].T
    return value, {k: grads[k] for k in P}


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def clip_gradients(grads: dict, max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              clip: float | None = 5.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction, after global-norm clipping."""
    if clip is not None:
        grads, _ = clip_gradients(grads, clip)
    state.step += 1
    b1 = 1.0 - beta1 ** state.step
    b2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[k] -= lr * (m / b1) / (np.sqrt(v / b2) + eps)
    return state


# ---------------------------------------------------------------------------
# training

def standardize(v, mean, std):
    return (v - mean) / std


def destandardize(v, mean, std):
    return v * std + mean


def _stats(a, axis):
    mean = a.mean(axis=axis)
    std = a.std(axis=axis)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def fit_statistics(model: ShredModel, windows, targets, inputs: bool = True) -> None:
    """Per-coefficient target statistics (and per-channel input ones) from TRAIN data."""
    model.y_mean, model.y_std = _stats(np.asarray(targets, dtype=float), 0)
    if inputs:
        last = np.asarray(windows, dtype=float)[:, -1, :]
        model.x_mean, model.x_std = _stats(last, 0)


def train(model: ShredModel, train_data, val_data, config: TrainConfig | None = None,
          standardize_inputs: bool = True, input_noise=0.0, callback=None):
    """Mini-batch Adam with early stopping on the validation loss.

    ``train_data`` and ``val_data`` are ``(windows, targets)`` pairs with
    targets in latent units.  ``input_noise`` (scalar or per channel) draws
    fresh multiplicative noise ``1 + N(0, sigma^2)`` on every training batch.
    Returns ``(model, history)``; the model holds the best-validation
    parameters.
    """
    config = config or TrainConfig()
    Xtr, Ytr = (np.asarray(a, dtype=float) for a in train_data)
    Xva, Yva = (np.asarray(a, dtype=float) for a in val_data)
    if len(Xtr) == 0 or len(Xva) == 0:
        raise ValueError("TRAIN and VALIDATION data must be non-empty")
    model = model.copy()
    fit_statistics(model, Xtr, Ytr, inputs=standardize_inputs)
    Ttr = standardize(Ytr, model.y_mean, model.y_std)
    Tva = standardize(Yva, model.y_mean, model.y_std)
    rng = np.random.default_rng(config.seed)
    noise = np.broadcast_to(np.asarray(input_noise, dtype=float), (Xtr.shape[2],))
    state = AdamState()
    best = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    wait = 0
    history = []
    n = len(Xtr)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = Xtr[idx]
            if np.any(noise > 0):
                xb = xb * (1.0 + noise * rng.standard_normal(xb.shape))
            value, grads = backward(model, xb, Ttr[idx], train=True, rng=rng)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"training loss diverged at epoch {epoch}")
            adam_step(model.params, grads, state, config.lr, config.clip)
            total += value * len(idx)
        train_loss = total / n
        val_loss = evaluate_loss(model, Xva, Tva)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDivergedError(f"training loss diverged at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if callback is not None:
            callback(epoch, train_loss, val_loss)
        if val_loss < best:
            best = val_loss
            best_params = {k: v.copy() for k, v in model.params.items()}
            wait = 0
        else:
            wait += 1
            if wait > config.patience:
                break
    model.params = best_params
    return model, history


def evaluate_loss(model: ShredModel, windows, std_targets, batch: int = 512) -> float:
    total = 0.0
    for start in range(0, len(windows), batch):
        pred = forward(model, windows[start:start + batch])
        total += float(np.sum((pred - std_targets[start:start + batch]) ** 2))
    return total / std_targets.size


def predict(model: ShredModel, windows, batch: int = 512) -> np.ndarray:
    """De-standardized predictions, one row per window."""
    windows = np.asarray(windows, dtype=float)
    out = [forward(model, windows[s:s + batch]) for s in range(0, len(windows), batch)]
    return destandardize(np.vstack(out), model.y_mean, model.y_std)


def window_inputs(model: ShredModel, series, tau: float | None = None) -> np.ndarray:
    win = lag_series(series, model.K).windows
    if model.use_tau:
        if tau is None:
            raise ValueError("model expects tau as an input")
        win = np.concatenate([win, np.full(win.shape[:2] + (1,), float(tau))], axis=2)
    return win


def predict_latent(model: ShredModel, series: MeasurementSeries, offsets: dict | None = None,
                   tau: float | None = None):
    """Latent trajectory ``r_total x N_t`` for one case."""
    from .compression import LatentSeries

    if series.s != model.s:
        raise ValueError(f"series has {series.s} channels, model expects {model.s}")
    coeffs = predict(model, window_inputs(model, series, tau)).T
    if offsets is None:
        offsets = {"all": (0, model.r_total)}
    return LatentSeries(coeffs, offsets, tau)


# ---------------------------------------------------------------------------
# checkpoints

MODEL_MAGIC = b"SHRDMODL"
MODEL_VERSION = 1


def model_bytes(model: ShredModel) -> bytes:
    parts = [MODEL_MAGIC,
             struct.pack("<IIIIIIdQ?", MODEL_VERSION, model.s, model.K, model.r_total,
                         model.hidden, len(model.decoder), model.dropout, model.seed,
                         model.use_tau),
             struct.pack(f"<{len(model.decoder)}I", *model.decoder),
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        parts.append(_pack_string(name))
        parts.append(np.asarray(p, dtype="<f8").tobytes(order="C"))
    for v in (model.y_mean, model.y_std, model.x_mean, model.x_std):
        parts.append(np.asarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def write_model_file(model: ShredModel, path) -> None:
    atomic_write_bytes(path, model_bytes(model))


def read_model_file(path) -> ShredModel:
    path = Path(path)
    buf = path.read_bytes()
    r = read_header(buf, path, MODEL_MAGIC, MODEL_VERSION)
    s, K, r_total, hidden, n_dec, dropout, seed, use_tau = r.unpack("<IIIIIdQ?")
    decoder = r.unpack(f"<{n_dec}I")
    decoder = (decoder,) if n_dec == 1 else tuple(decoder)
    n_params = r.unpack("<I")
    shapes = param_shapes(s + int(use_tau), r_total, hidden, decoder)
    params = {}
    for _ in range(n_params):
        name = r.string()
        if name not in shapes:
            raise ValueError(f"{path}: unknown parameter block {name}")
        shape = shapes[name]
        params[name] = r.f64(int(np.prod(shape))).reshape(shape)
    n_in = s + int(use_tau)
    y_mean, y_std = r.f64(r_total), r.f64(r_total)
    x_mean, x_std = r.f64(n_in), r.f64(n_in)
    r.expect_end()
    return ShredModel(s, K, r_total, params, hidden, decoder, dropout, seed, bool(use_tau),
                      y_mean, y_std, x_mean, x_std)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for epoch, tr, va in history:
        w.writerow([epoch, repr(float(tr)), repr(float(va))])
    return buf.getvalue()
