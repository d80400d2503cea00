"""Sliding-window gaze regressor with hand-written backpropagation.

Architecture, for a window ``X`` of shape (w, f):

    Q, K, V = X Wq + bq, X Wk + bk, X Wv + bv          (w, d)
    A = softmax(Q K^T / sqrt(d))                         (w, w), rows sum to 1
    h0 = flatten(A V + V)                                (w * d,)
    h_l = dropout(leaky_relu(h_{l-1} W_l + b_l))         hidden layers
    out = h_L Wo + bo                                    (3,)

The residual ``+ V`` (switchable with ``attention_residual``) keeps each
frame's own projection visible to the MLP; without it the near-uniform
attention of an untrained model blurs all frames together and windowed
models train worse than single-frame ones.

Inputs are standardised with feature statistics taken from the training set.
Training minimises the batch-mean squared error with Adam and stops early on a
validation plateau.  Everything runs on numpy and is deterministic for a given
seed.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .conic import EllipseParams, Point2
from .errors import DimensionMismatch, EmptyDataset, InvalidConfig, LengthMismatch, TooShortSequence

FEATURE_NAMES = ("cx", "cy", "semi_major", "semi_minor", "sin2theta", "cos2theta")
FEATURE_DIM = len(FEATURE_NAMES)
FALLBACK_GAZE = (0.0, 0.0, 1.0)


class GazeVector(NamedTuple):
    dx: float
    dy: float
    dz: float


@dataclass(frozen=True)
class GazeSample:
    frame_index: int
    pupil: EllipseParams
    target: GazeVector


@dataclass
class ModelConfig:
    window_size: int = 1
    feature_dim: int = FEATURE_DIM
    attention_dim: int = 16
    hidden_sizes: tuple = (64, 32)
    leaky_slope: float = 0.01
    dropout_p: float = 0.1
    attention_residual: bool = True
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    max_epochs: int = 1000
    batch_size: int = 32
    seed: int = 0
    loss_on_normalized: bool = False

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.window_size < 1:
            raise InvalidConfig("window_size must be >= 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise InvalidConfig("hidden_sizes must be a non-empty list of positive sizes")
        if not 0 <= self.dropout_p < 1:
            raise InvalidConfig("dropout_p must lie in [0, 1)")
        if self.attention_dim < 1 or self.feature_dim < 1:
            raise InvalidConfig("attention_dim and feature_dim must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise InvalidConfig("batch_size and patience must be >= 1, max_epochs >= 0")
        if self.seed < 0:
            raise InvalidConfig("seed must be unsigned")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known - {"schema_version"}
        if extra:
            raise InvalidConfig(f"unknown model config keys: {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class TrainReport:
    epochs_run: int
    best_val_loss: float
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def frame_features(e: EllipseParams) -> np.ndarray:
    """Per-frame input vector; the orientation enters as 2*theta because an
    ellipse is unchanged by a half turn."""
    return np.array(
        [e.cx, e.cy, e.semi_major, e.semi_minor, math.sin(2 * e.theta), math.cos(2 * e.theta)]
    )


def make_windows(samples: Sequence[GazeSample], window_size: int):
    """``(window, target)`` pairs, one per frame that has ``window_size - 1``
    predecessors.  The label is the gaze of the window's last frame."""
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    if len(samples) < window_size:
        raise TooShortSequence(f"{len(samples)} samples cannot fill a window of {window_size}")
    idx = [s.frame_index for s in samples]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError("frame indices must be strictly increasing")
    feats = np.stack([frame_features(s.pupil) for s in samples])
    return [
        (feats[i - window_size + 1 : i + 1], GazeVector(*samples[i].target))
        for i in range(window_size - 1, len(samples))
    ]


def windows_to_arrays(pairs):
    if not pairs:
        raise EmptyDataset("no windows")
    x = np.stack([np.asarray(w, dtype=float) for w, _ in pairs])
    y = np.array([tuple(t) for _, t in pairs], dtype=float)
    return x, y


def normalize_gaze(raw):
    """Unit vectors and a per-row flag marking zero-vector fallbacks."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    # rescale first so tiny or huge vectors do not under/overflow in the norm
    peak = np.max(np.abs(raw), axis=1)
    zero = peak == 0
    scaled = raw / np.where(zero, 1.0, peak)[:, None]
    norm = np.linalg.norm(scaled, axis=1)
    out = np.where(zero[:, None], np.array(FALLBACK_GAZE), scaled / np.where(zero, 1.0, norm)[:, None])
    return out, zero


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


class GVNet:
    """Parameters, input scaling, dropout RNG and Adam state of one model."""

    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        seq = np.random.SeedSequence(config.seed)
        init_ss, drop_ss, shuffle_ss = seq.spawn(3)
        self.dropout_rng = np.random.default_rng(drop_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.feature_mean = np.zeros(config.feature_dim)
        self.feature_std = np.ones(config.feature_dim)
        self.params: dict[str, np.ndarray] = {}
        self.adam_t = 0
        self.learning_rate = config.learning_rate
        if init:
            self._init_params(np.random.default_rng(init_ss))
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def param_shapes(self):
        c = self.config
        f, d = c.feature_dim, c.attention_dim
        shapes = [("wq", (f, d)), ("bq", (d,)), ("wk", (f, d)), ("bk", (d,)), ("wv", (f, d)), ("bv", (d,))]
        n_in = c.window_size * d
        for i, h in enumerate(c.hidden_sizes):
            shapes += [(f"w{i}", (n_in, h)), (f"b{i}", (h,))]
            n_in = h
        shapes += [("wo", (n_in, 3)), ("bo", (3,))]
        return shapes

    def _init_params(self, rng):
        for name, shape in self.param_shapes():
            if len(shape) == 1:
                self.params[name] = np.zeros(shape)
            else:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                self.params[name] = rng.uniform(-bound, bound, shape)

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden_sizes)

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_feature_scaling(self, x: np.ndarray):
        """Standardise inputs using per-feature statistics of ``x`` (n, w, f)."""
        flat = x.reshape(-1, x.shape[-1])
        self.feature_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.feature_std = np.where(std > 1e-12, std, 1.0)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        c = self.config
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (c.window_size, c.feature_dim):
            raise DimensionMismatch(
                f"expected windows of shape ({c.window_size}, {c.feature_dim}), got {x.shape[-2:]}"
            )
        return x

    def forward_batch(self, x, training: bool = False, masks=None):
        """Raw outputs (n, 3) and the cache needed by :meth:`backward_batch`."""
        x = self._check(x)
        p, c = self.params, self.config
        xn = (x - self.feature_mean) / self.feature_std
        q = xn @ p["wq"] + p["bq"]
        k = xn @ p["wk"] + p["bk"]
        v = xn @ p["wv"] + p["bv"]
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(c.attention_dim)
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        z = a @ v
        if c.attention_residual:
            z = z + v
        h = z.reshape(len(x), -1)
        hs, pres, used_masks = [h], [], []
        for i in range(self.n_hidden):
            pre = h @ p[f"w{i}"] + p[f"b{i}"]
            act = _leaky(pre, c.leaky_slope)
            if masks is not None:
                m = masks[i]
            elif training and c.dropout_p > 0:
                keep = 1.0 - c.dropout_p
                m = (self.dropout_rng.random(act.shape) < keep) / keep
            else:
                m = None
            h = act if m is None else act * m
            pres.append(pre)
            used_masks.append(m)
            hs.append(h)
        out = h @ p["wo"] + p["bo"]
        cache = {"xn": xn, "q": q, "k": k, "v": v, "a": a, "hs": hs, "pres": pres, "masks": used_masks, "out": out}
        return out, cache

    def backward_batch(self, cache, d_out):
        """Parameter gradients given d(loss)/d(out) of shape (n, 3)."""
        p, c = self.params, self.config
        g = {}
        hs, pres, masks = cache["hs"], cache["pres"], cache["masks"]
        g["wo"] = hs[-1].T @ d_out
        g["bo"] = d_out.sum(axis=0)
        dh = d_out @ p["wo"].T
        for i in reversed(range(self.n_hidden)):
            if masks[i] is not None:
                dh = dh * masks[i]
            dpre = dh * np.where(pres[i] > 0, 1.0, c.leaky_slope)
            g[f"w{i}"] = hs[i].T @ dpre
            g[f"b{i}"] = dpre.sum(axis=0)
            dh = dpre @ p[f"w{i}"].T
        n = len(d_out)
        dz = dh.reshape(n, c.window_size, c.attention_dim)
        a, q, k, v, xn = cache["a"], cache["q"], cache["k"], cache["v"], cache["xn"]
        da = dz @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dz
        if c.attention_residual:
            dv = dv + dz
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        ds /= math.sqrt(c.attention_dim)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            g[f"w{name}"] = np.einsum("nwf,nwd->fd", xn, d)
            g[f"b{name}"] = d.sum(axis=(0, 1))
        return g

    def loss_and_grad(self, x, y, training: bool = True, masks=None):
        """Batch-mean MSE and its gradients."""
        y = np.asarray(y, dtype=float).reshape(-1, 3)
        out, cache = self.forward_batch(x, training, masks)
        if self.config.loss_on_normalized:
            norm = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
            pred = out / norm
        else:
            pred = out
        diff = pred - y
        loss = float(np.mean(diff**2))
        d_pred = 2.0 * diff / diff.size
        if self.config.loss_on_normalized:
            d_out = (d_pred - pred * np.sum(d_pred * pred, axis=1, keepdims=True)) / norm
        else:
            d_out = d_pred
        return loss, self.backward_batch(cache, d_out), cache

    def adam_step(self, grads):
        c = self.config
        self.adam_t += 1
        b1, b2 = c.adam_beta1, c.adam_beta2
        corr1 = 1.0 - b1**self.adam_t
        corr2 = 1.0 - b2**self.adam_t
        for name, grad in grads.items():
            m = self.adam_m[name]
            v = self.adam_v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            self.params[name] -= self.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.adam_eps)

    def predict_raw(self, x) -> np.ndarray:
        return self.forward_batch(x, training=False)[0]

    def predict(self, x):
        """Unit gaze vectors (n, 3) and zero-vector fallback flags (n,)."""
        return normalize_gaze(self.predict_raw(x))

    def attention_weights(self, x) -> np.ndarray:
        return self.forward_batch(x, training=False)[1]["a"]


def build_model(config: ModelConfig) -> GVNet:
    return GVNet(config)


def forward(model: GVNet, window, training: bool = False) -> np.ndarray:
    """Raw 3-vector for one window."""
    return model.forward_batch(np.asarray(window, dtype=float)[None], training)[0][0]


def loss_mse(pred, target) -> float:
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(diff**2))


def backward_and_step(model: GVNet, batch) -> float:
    """One Adam update on ``batch``; returns the loss before the update."""
    if len(batch) == 0:
        raise EmptyDataset("batch is empty")
    x, y = windows_to_arrays(batch)
    loss, grads, _ = model.loss_and_grad(x, y, training=True)
    model.adam_step(grads)
    return loss


def evaluate_mse(model: GVNet, x, y) -> float:
    out = model.predict_raw(x)
    if model.config.loss_on_normalized:
        out = normalize_gaze(out)[0]
    return float(np.mean((out - y) ** 2))


def train(
    config: ModelConfig,
    train_set,
    val_set,
    on_epoch_start: Optional[Callable[[int, GVNet], None]] = None,
):
    """Fit a new model; returns ``(model, TrainReport)``.

    ``train_set`` and ``val_set`` are lists of ``(window, target)`` pairs or
    ``(x, y)`` array tuples.  The returned model carries the parameters of the
    epoch with the lowest validation loss.  ``on_epoch_start(epoch, model)``
    runs before each 1-based epoch.
    """
    start = time.perf_counter()
    xt, yt = _as_arrays(train_set)
    xv, yv = _as_arrays(val_set)
    model = GVNet(config)
    model._check(xt)
    model._check(xv)
    model.set_feature_scaling(xt)

    report = TrainReport(epochs_run=0, best_val_loss=math.inf)
    best_params = model.copy_params()
    since_best = 0
    n = len(xt)
    for epoch in range(1, config.max_epochs + 1):
        if on_epoch_start is not None:
            on_epoch_start(epoch, model)
        order = model.shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grads, _ = model.loss_and_grad(xt[idx], yt[idx], training=True)
            model.adam_step(grads)
            total += loss * len(idx)
        report.train_curve.append(total / n)
        val = evaluate_mse(model, xv, yv)
        report.val_curve.append(val)
        report.epochs_run = epoch
        if val < report.best_val_loss:
            report.best_val_loss = val
            best_params = model.copy_params()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.params = best_params
    if not report.val_curve:
        report.best_val_loss = evaluate_mse(model, xv, yv)
    report.wall_time_s = time.perf_counter() - start
    return model, report


def _as_arrays(data):
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray) and np.asarray(data[0]).ndim == 3:
        x, y = data
        if len(x) == 0:
            raise EmptyDataset("dataset is empty")
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float).reshape(-1, 3)
    if len(data) == 0:
        raise EmptyDataset("dataset is empty")
    return windows_to_arrays(list(data))


def mae_degree(preds, targets) -> float:
    """Mean angle in degrees between paired unit vectors."""
    p = np.asarray(preds, dtype=float).reshape(-1, 3)
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions vs {len(t)} targets")
    if len(p) == 0:
        raise LengthMismatch("no pairs to compare")
    cos = np.clip(np.sum(p * t, axis=1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


def mae_pixel(preds, targets) -> float:
    """Mean Euclidean distance between paired 2-D points."""
    p = np.asarray(preds, dtype=float).reshape(-1, 2)
    t = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions vs {len(t)} targets")
    if len(p) == 0:
        raise LengthMismatch("no pairs to compare")
    return float(np.mean(np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])))


def bench_throughput(model: GVNet, n: int = 1000, seed: int = 0) -> float:
    """Seconds for ``n`` sequential single-window inferences on one thread."""
    from threadpoolctl import threadpool_limits

    c = model.config
    rng = np.random.default_rng(seed)
    inputs = model.feature_mean + model.feature_std * rng.standard_normal((n, c.window_size, c.feature_dim))
    with threadpool_limits(limits=1):
        start = time.perf_counter()
        for i in range(n):
            model.predict(inputs[i])
        return time.perf_counter() - start


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"GZGMCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: GVNet, path) -> None:
    """Binary container: magic, version, JSON header, little-endian float64 arrays.

    Layout::

        8s   magic "GZGMCKPT"
        <I   format version
        <Q   header length, then UTF-8 JSON header (config, array names/shapes)
        per array, in declaration order: raw '<f8' data
    """
    arrays = [("feature_mean", model.feature_mean), ("feature_std", model.feature_std)]
    arrays += [(name, model.params[name]) for name, _ in model.param_shapes()]
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> GVNet:
    from .errors import ParseError, SchemaMismatch

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError("not a gaze_geom checkpoint", path=path)
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise SchemaMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}", path=path, field="version")
    (hlen,) = struct.unpack_from("<Q", data, 12)
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", path=path) from exc
    model = GVNet(ModelConfig.from_dict(header["config"]), init=False)
    offset = 20 + hlen
    loaded = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ParseError("checkpoint truncated", path=path, field=entry["name"])
        loaded[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(float)
        offset = end
    model.feature_mean = loaded.pop("feature_mean")
    model.feature_std = loaded.pop("feature_std")
    expected = dict(model.param_shapes())
    for name, shape in expected.items():
        if name not in loaded or loaded[name].shape != shape:
            raise SchemaMismatch("checkpoint arrays do not match the config", path=path, field=name)
        model.params[name] = loaded[name]
    model.adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    model.adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    return model
