"""Per-ID LSTM autoencoder in plain numpy, trained with BPTT and Adam.

Architecture (per time step, windows of n steps and k signals)::

    encoder:  dense k->128 (ELU) -> dropout 0.2 -> LSTM 64 -> LSTM 64
    handoff:  encoder output sequence is time-reversed; the last encoder
              layer's final (h, c) initializes the first decoder LSTM
    decoder:  LSTM 64 -> LSTM 64 -> dense 64->128 (ELU) -> dense 128->k (sigmoid)

The decoder emits the reconstruction in reversed time order (its target is
the reversed window); :func:`forward` flips it back to source order. Nothing
reconstructed is fed back into the decoder.

All functions take batches ``(B, n, k)``; a single ``(n, k)`` window is
promoted to ``B = 1``. LSTM gates are packed ``[input, forget, cell, output]``
along the last axis of ``W`` (input kernel), ``U`` (recurrent kernel) and ``b``.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import (ConfigError, DigestMismatch, ModelFormatError, NumericFailure,
                     ShapeMismatch, TrainingFailure)
from .signals import SignalLayout

LSTM_LAYERS = ("enc_lstm1", "enc_lstm2", "dec_lstm1", "dec_lstm2")
MODEL_FORMAT = "candito-model"
MODEL_VERSION = 1

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    dropout_rate: float = 0.20
    batch_size: int = 64
    seed: int = 0
    window: int = 40
    dense_units: int = 128
    lstm_units: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if not (0 < self.learning_rate < 1 and 0 <= self.dropout_rate < 1):
            raise ConfigError("learning_rate must be in (0,1), dropout_rate in [0,1)")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs, patience and batch_size must be >= 1")


# --------------------------------------------------------------------------
# parameters

def _glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def _orthogonal(rng, h, dtype):
    a = rng.standard_normal((4 * h, h))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q.T.astype(dtype)                      # (h, 4h), orthonormal rows


def init_params(k: int, *, dense_units: int = 128, lstm_units: int = 64,
                seed: int = 0, dtype="float32") -> Params:
    rng = np.random.default_rng(seed)
    D, H = dense_units, lstm_units
    p: Params = {
        "enc_dense.W": _glorot(rng, k, D, dtype),
        "enc_dense.b": np.zeros(D, dtype),
    }
    for name, n_in in zip(LSTM_LAYERS, (D, H, H, H)):
        b = np.zeros(4 * H, dtype)
        b[H:2 * H] = 1.0                           # forget-gate bias
        p[f"{name}.W"] = _glorot(rng, n_in, 4 * H, dtype)
        p[f"{name}.U"] = _orthogonal(rng, H, dtype)
        p[f"{name}.b"] = b
    p["dec_dense.W"] = _glorot(rng, H, D, dtype)
    p["dec_dense.b"] = np.zeros(D, dtype)
    p["out_dense.W"] = _glorot(rng, D, k, dtype)
    p["out_dense.b"] = np.zeros(k, dtype)
    return p


def param_k(params: Params) -> int:
    return params["out_dense.b"].shape[0]


def _sigmoid(z, out=None):
    # tanh form: identical function, several times faster than scipy's expit
    out = np.multiply(z, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0)))


def _elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0))).astype(a.dtype)


# --------------------------------------------------------------------------
# LSTM layer over a full sequence

def _lstm_forward(name, xs, h0, c0, W, U, b):
    """Time-major LSTM: ``xs`` is (T, B, I); returns hs, cs of shape (T, B, H)."""
    T, B, _ = xs.shape
    H = U.shape[0]
    zx = xs @ W + b
    hs = np.empty((T, B, H), xs.dtype)
    cs = np.empty((T, B, H), xs.dtype)
    tcs = np.empty((T, B, H), xs.dtype)
    gates = np.empty((T, B, 4 * H), xs.dtype)
    h, c = h0, c0
    for t in range(T):
        a = gates[t]
        np.add(zx[t], h @ U, out=a)
        g = np.tanh(a[:, 2 * H:3 * H])
        _sigmoid(a, out=a)
        a[:, 2 * H:3 * H] = g
        c = a[:, H:2 * H] * c + a[:, :H] * g
        tc = np.tanh(c, out=tcs[t])
        h = np.multiply(a[:, 3 * H:], tc, out=hs[t])
        cs[t] = c
    finite = np.isfinite(hs).all(axis=(1, 2)) & np.isfinite(cs).all(axis=(1, 2))
    if not finite.all():
        raise NumericFailure(f"non-finite activation in {name} at step {int(np.argmin(finite))}")
    return hs, cs, (xs, h0, c0, gates, tcs)


def _lstm_backward(dhs, dhT, dcT, cache, W, U, cs, hs):
    xs, h0, c0, gates, tcs = cache
    T, B, H = hs.shape
    i, f, g, o = (gates[..., k * H:(k + 1) * H] for k in range(4))
    c_prev = np.concatenate([c0[None], cs[:-1]], axis=0)
    # step-independent factors, computed for all t at once
    dc_from_h = o * (1 - tcs * tcs)
    coef = np.empty_like(gates)
    coef[..., :H] = g * i * (1 - i)
    coef[..., H:2 * H] = c_prev * f * (1 - f)
    coef[..., 2 * H:3 * H] = i * (1 - g * g)
    coef[..., 3 * H:] = tcs * o * (1 - o)
    coef4 = coef.reshape(T, B, 4, H)
    dz = np.empty_like(gates)
    dz4 = dz.reshape(T, B, 4, H)
    UT = np.ascontiguousarray(U.T)
    dh_next, dc_next = dhT, dcT
    for t in range(T - 1, -1, -1):
        dh = dhs[t] if dh_next is None else dhs[t] + dh_next
        dc = dh * dc_from_h[t]
        if dc_next is not None:
            dc += dc_next
        np.multiply(dc[:, None, :], coef4[t, :, :3], out=dz4[t, :, :3])
        np.multiply(dh, coef4[t, :, 3], out=dz4[t, :, 3])
        dc_next = dc * f[t]
        dh_next = dz[t] @ UT
    h_prev = np.concatenate([h0[None], hs[:-1]], axis=0)
    dz2 = dz.reshape(T * B, 4 * H)
    dW = xs.reshape(T * B, -1).T @ dz2
    dU = h_prev.reshape(T * B, H).T @ dz2
    db = dz2.sum(axis=0)
    dxs = dz @ W.T
    return dxs, dh_next, dc_next, dW, dU, db


# --------------------------------------------------------------------------
# full model

@dataclass
class ForwardCache:
    x: np.ndarray
    a1: np.ndarray
    mask: np.ndarray | None
    layers: dict = field(default_factory=dict)
    a2: np.ndarray | None = None
    e: np.ndarray | None = None
    y_rev: np.ndarray | None = None


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (n, k) or (B, n, k) input, got shape {x.shape}")
    return x, False


def forward(params: Params, window, training: bool = False,
            rng: np.random.Generator | None = None, dropout_rate: float = 0.2,
            mask: np.ndarray | None = None):
    """Reconstruct ``window`` (source order). Returns ``(reconstruction, cache)``.

    With ``training=True`` an inverted-dropout mask of shape ``(B, n, dense)``
    is drawn from ``rng`` unless an explicit ``mask`` (already scaled) is
    supplied.
    """
    xb, single = _as_batch(window)
    k = param_k(params)
    if xb.shape[2] != k:
        raise ShapeMismatch(f"model expects k={k} signals, window has {xb.shape[2]}")
    dtype = params["enc_dense.W"].dtype
    # internally time-major (n, B, .): every recurrent step reads a contiguous slab
    x = np.ascontiguousarray(xb.astype(dtype, copy=False).transpose(1, 0, 2))
    n, B, _ = x.shape
    H = params["enc_lstm1.U"].shape[0]
    zeros = np.zeros((B, H), dtype)

    a1 = x @ params["enc_dense.W"] + params["enc_dense.b"]
    d = _elu(a1)
    if training and mask is None and dropout_rate > 0:
        rng = rng if rng is not None else np.random.default_rng()
        keep = rng.random((B, n, a1.shape[2])) >= dropout_rate
        mask = (keep / (1.0 - dropout_rate)).astype(dtype)
    if training and mask is not None:
        mask = np.asarray(mask, dtype).transpose(1, 0, 2)
        d = d * mask
    else:
        mask = None
    cache = ForwardCache(x, a1, mask)

    def run(name, xs, h0, c0):
        hs, cs, c = _lstm_forward(name, xs, h0, c0, params[f"{name}.W"],
                                  params[f"{name}.U"], params[f"{name}.b"])
        cache.layers[name] = (hs, cs, c)
        return hs, cs

    h1, _ = run("enc_lstm1", d, zeros, zeros)
    h2, c2 = run("enc_lstm2", h1, zeros, zeros)
    g1, _ = run("dec_lstm1", np.ascontiguousarray(h2[::-1]), h2[-1], c2[-1])
    g2, _ = run("dec_lstm2", g1, zeros, zeros)
    a2 = g2 @ params["dec_dense.W"] + params["dec_dense.b"]
    e = _elu(a2)
    y_rev = _sigmoid(e @ params["out_dense.W"] + params["out_dense.b"])
    if not np.isfinite(y_rev).all():
        raise NumericFailure("non-finite activation in out_dense")
    cache.a2, cache.e, cache.y_rev = a2, e, y_rev
    recon = y_rev[::-1].transpose(1, 0, 2)
    return (recon[0] if single else recon), cache


def reconstruct(params: Params, window) -> np.ndarray:
    return forward(params, window, training=False)[0]


def loss(reconstruction, target) -> float:
    reconstruction = np.asarray(reconstruction)
    target = np.asarray(target)
    if reconstruction.shape != target.shape:
        raise ShapeMismatch(f"{reconstruction.shape} vs {target.shape}")
    return float(np.mean((reconstruction.astype(np.float64) - target) ** 2))


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def backward(params: Params, cache: ForwardCache, target=None) -> Params:
    """Exact gradients of the mean-squared reconstruction error.

    ``target`` defaults to the cached input (the autoencoder objective).
    """
    x = cache.x
    if target is None:
        t_rev = x[::-1]
    else:
        t_rev = _as_batch(target)[0].astype(x.dtype).transpose(1, 0, 2)[::-1]
    n, B, k = x.shape
    y_rev = cache.y_rev
    grads: Params = {}

    dy = (2.0 / (B * n * k)) * (y_rev - t_rev)
    da3 = (dy * y_rev * (1 - y_rev)).astype(x.dtype)
    grads["out_dense.W"] = _flat(cache.e).T @ _flat(da3)
    grads["out_dense.b"] = da3.sum(axis=(0, 1))
    da2 = (da3 @ params["out_dense.W"].T) * _elu_grad(cache.a2)
    grads["dec_dense.W"] = _flat(cache.layers["dec_lstm2"][0]).T @ _flat(da2)
    grads["dec_dense.b"] = da2.sum(axis=(0, 1))
    dg2 = da2 @ params["dec_dense.W"].T

    def back(name, dhs, dhT=None, dcT=None):
        hs, cs, c = cache.layers[name]
        dxs, dh0, dc0, dW, dU, db = _lstm_backward(
            dhs, dhT, dcT, c, params[f"{name}.W"], params[f"{name}.U"], cs, hs)
        grads[f"{name}.W"], grads[f"{name}.U"], grads[f"{name}.b"] = dW, dU, db
        return dxs, dh0, dc0

    dg1, _, _ = back("dec_lstm2", dg2)
    drev, dh_init, dc_init = back("dec_lstm1", dg1)
    # the decoder's initial state is the encoder's final state
    dh2 = drev[::-1].copy()
    dh1, _, _ = back("enc_lstm2", dh2, dh_init, dc_init)
    dd, _, _ = back("enc_lstm1", dh1)
    if cache.mask is not None:
        dd = dd * cache.mask
    da1 = dd * _elu_grad(cache.a1)
    grads["enc_dense.W"] = _flat(x).T @ _flat(da1)
    grads["enc_dense.b"] = da1.sum(axis=(0, 1))

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFailure(f"non-finite gradient for {name}")
    return {name: grads[name] for name in params}


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params: Params, grads: Params, state: AdamState, learning_rate: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------
# training

class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly lower validation loss;
    remembers the best parameters seen."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.best_params: Params | None = None
        self.wait = 0

    def update(self, epoch: int, val_loss: float, params: Params | None = None) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            if params is not None:
                self.best_params = {n: p.copy() for n, p in params.items()}
        else:
            self.wait += 1
        return self.wait >= self.patience


def evaluate_loss(params: Params, windows: np.ndarray, chunk: int = 512) -> float:
    """Mean MSE over windows, dropout off."""
    total = 0.0
    for s in range(0, len(windows), chunk):
        x = windows[s:s + chunk]
        r = reconstruct(params, x)
        total += float(np.sum((r.astype(np.float64) - x) ** 2))
    return total / windows.size


@dataclass
class ModelBundle:
    params: Params
    can_id: int = -1
    layout: SignalLayout | None = None
    threshold: object | None = None        # detector.ThresholdRecord
    report: dict = field(default_factory=dict)
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def k(self) -> int:
        return param_k(self.params)

    @property
    def layout_digest(self) -> str | None:
        return self.layout.digest() if self.layout is not None else None

    def reconstruct(self, window):
        return reconstruct(self.params, window)


def train(train_windows: np.ndarray, val_windows: np.ndarray,
          config: TrainConfig = TrainConfig(), *, can_id: int = -1,
          layout: SignalLayout | None = None,
          log: Callable[[str], None] | None = None) -> ModelBundle:
    """Minibatch Adam on the reconstruction MSE with early stopping.

    ``train_windows`` / ``val_windows`` are ``(W, n, k)`` arrays (or
    WindowBatch objects) of untampered windows.
    """
    train_windows = getattr(train_windows, "windows", train_windows)
    val_windows = getattr(val_windows, "windows", val_windows)
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ConfigError("training and validation batches must be non-empty")
    dtype = np.dtype(config.dtype)
    train_windows = np.asarray(train_windows, dtype=dtype)
    val_windows = np.asarray(val_windows, dtype=dtype)
    k = train_windows.shape[2]
    if val_windows.shape[2] != k:
        raise ShapeMismatch("train and validation windows differ in k")

    params = init_params(k, dense_units=config.dense_units, lstm_units=config.lstm_units,
                         seed=config.seed, dtype=dtype)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([config.seed, 1])
    stopper = EarlyStopping(config.patience)
    history = []
    stop_epoch = config.max_epochs
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            xb = train_windows[order[s:s + config.batch_size]]
            recon, cache = forward(params, xb, training=True, rng=rng,
                                   dropout_rate=config.dropout_rate)
            total += float(np.sum((recon.astype(np.float64) - xb) ** 2))
            grads = backward(params, cache)
            adam_step(params, grads, state, config.learning_rate)
        train_loss = total / train_windows.size
        val_loss = evaluate_loss(params, val_windows)
        if not np.isfinite(val_loss):
            raise TrainingFailure(f"validation loss diverged at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if log:
            log(f"id {can_id:#x} epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}")
        if stopper.update(epoch, val_loss, params):
            stop_epoch = epoch
            break
    report = {"history": history, "best_epoch": stopper.best_epoch,
              "best_val_loss": stopper.best, "stop_epoch": stop_epoch,
              "train_windows": int(len(train_windows)), "val_windows": int(len(val_windows))}
    return ModelBundle(stopper.best_params, can_id, layout, None, report, config)


# --------------------------------------------------------------------------
# serialization

def save_model(bundle: ModelBundle, dest) -> None:
    """Write an npz container: parameters as explicit little-endian arrays plus
    a JSON metadata blob (format, version, id, k, signal-map digest, threshold)."""
    thr = bundle.threshold
    meta = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "can_id": bundle.can_id,
            "k": bundle.k, "dtype": str(bundle.params["enc_dense.W"].dtype),
            "param_names": list(bundle.params),
            "layout_digest": bundle.layout_digest,
            "layout": bundle.layout.to_record() if bundle.layout else None,
            "threshold": thr.to_dict() if thr is not None else None,
            "config": asdict(bundle.config), "report": bundle.report}
    arrays = {f"p{i}": p.astype(p.dtype.newbyteorder("<"))
              for i, p in enumerate(bundle.params.values())}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "wb") as fh:
            np.savez(fh, **arrays)
    else:
        np.savez(dest, **arrays)


def dumps_model(bundle: ModelBundle) -> bytes:
    buf = io.BytesIO()
    save_model(bundle, buf)
    return buf.getvalue()


def load_model(src, expected_digest: str | None = None) -> ModelBundle:
    from .detector import ThresholdRecord

    if isinstance(src, (bytes, bytearray)):
        src = io.BytesIO(src)
    try:
        with np.load(src, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != MODEL_FORMAT:
                raise ModelFormatError("not a model file")
            if meta.get("version") != MODEL_VERSION:
                raise ModelFormatError(f"unsupported model version {meta.get('version')}")
            dtype = np.dtype(meta["dtype"])
            params = {name: z[f"p{i}"].astype(dtype)
                      for i, name in enumerate(meta["param_names"])}
    except ModelFormatError:
        raise
    except Exception as exc:       # zip / npy / json corruption of any flavour
        raise ModelFormatError(f"cannot read model: {exc}") from None
    if expected_digest is not None and meta["layout_digest"] != expected_digest:
        raise DigestMismatch(f"model for id {meta['can_id']:#x} was trained on a different "
                             f"signal map ({meta['layout_digest']} != {expected_digest})")
    if param_k(params) != meta["k"]:
        raise ModelFormatError("parameter shapes disagree with recorded k")
    layout = SignalLayout.from_record(meta["layout"]) if meta["layout"] else None
    thr = ThresholdRecord.from_dict(meta["threshold"]) if meta["threshold"] else None
    return ModelBundle(params, meta["can_id"], layout, thr, meta["report"],
                       TrainConfig(**meta["config"]))
