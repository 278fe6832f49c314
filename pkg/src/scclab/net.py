"""One-hidden-layer classifier with independent per-class sigmoid outputs.

The output head is a bank of C independent sigmoids (no softmax), so every
class probability is estimated on its own; all losses are binary
cross-entropy shaped. Everything runs in float64 and gradients are analytic,
verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

EPS = 1e-7  # probability clamp inside every log term

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class MlpModel:
    """Parameters of the [d -> h -> C] network.

    ``dropout_rate`` applies to the hidden layer in train mode only
    (inverted dropout: survivors scaled by 1/(1-p)).
    """

    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, C)
    b2: np.ndarray  # (C,)
    dropout_rate: float = 0.0

    @property
    def layer_sizes(self):
        return (self.w1.shape[0], self.w1.shape[1], self.w2.shape[1])

    def copy(self):
        return MlpModel(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.dropout_rate,
        )

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return self.dropout_rate == other.dropout_rate and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES
        )


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, model):
        return cls(*(np.zeros_like(getattr(model, n)) for n in PARAM_NAMES))

    def add_scaled(self, other, scale=1.0):
        for n in PARAM_NAMES:
            arr = getattr(self, n)
            arr += scale * getattr(other, n)
        return self


@dataclass
class LossBreakdown:
    """Per-sample blend of web and self losses: total = c*l_w + (1-c)*l_s."""

    l_w: float
    l_s: float
    c: float
    total: float


def init_model(dim, hidden, num_classes, rng, dropout_rate=0.0):
    """He-initialized hidden layer, Xavier-ish output layer, zero biases."""
    w1 = rng.standard_normal((dim, hidden)) * np.sqrt(2.0 / dim)
    w2 = rng.standard_normal((hidden, num_classes)) * np.sqrt(1.0 / hidden)
    return MlpModel(
        w1=w1,
        b1=np.zeros(hidden),
        w2=w2,
        b2=np.zeros(num_classes),
        dropout_rate=dropout_rate,
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    mask: Optional[np.ndarray]
    hidden: np.ndarray  # post-relu, post-dropout
    probs: np.ndarray


def batch_forward(model, x, train_mode=False, rng=None):
    """Forward pass over a (n, d) batch; returns (probs, cache).

    Dropout is applied only in train mode with ``dropout_rate > 0`` (then
    ``rng`` is required); otherwise train and eval passes are identical.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.w1.shape[0]:
        raise ValueError(
            f"expected input of shape (n, {model.w1.shape[0]}), got {x.shape}"
        )
    z1 = x @ model.w1 + model.b1
    a = np.maximum(z1, 0.0)
    mask = None
    p = model.dropout_rate
    if train_mode and p > 0.0:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = rng.random(a.shape) >= p
        a = a * mask / (1.0 - p)
    z2 = a @ model.w2 + model.b2
    probs = expit(z2)
    return probs, ForwardCache(x=x, z1=z1, mask=mask, hidden=a, probs=probs)


def forward(model, x, mode="eval", rng=None):
    """Per-class sigmoid probabilities for one sample or a batch.

    Accepts a (d,) vector or (n, d) matrix; the output matches the leading
    shape. Eval mode is deterministic; train mode applies dropout.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    probs, _ = batch_forward(model, x[None, :] if single else x,
                             train_mode=(mode == "train"), rng=rng)
    return probs[0] if single else probs


def hidden_features(model, x):
    """Eval-mode hidden-layer activations, (n, h)."""
    _, cache = batch_forward(model, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return cache.hidden


# ---------------------------------------------------------------------------
# Losses. All log terms see probabilities clamped to [EPS, 1-EPS].
# ---------------------------------------------------------------------------

def one_hot(label, num_classes):
    t = np.zeros(num_classes)
    t[label] = 1.0
    return t


def smoothed_one_hot(label, num_classes, epsilon):
    """Target with 1-epsilon at the label and epsilon on every other class."""
    t = np.full(num_classes, epsilon)
    t[label] = 1.0 - epsilon
    return t


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def bce_rows(probs, targets):
    """Per-row sum of binary cross-entropies, shape (n,)."""
    q = _clamp(probs)
    return -np.sum(targets * np.log(q) + (1.0 - targets) * np.log1p(-q), axis=-1)


def neg_entropy_rows(probs):
    """Per-row sum of q*ln q + (1-q)*ln(1-q) (the over-confidence penalty)."""
    q = _clamp(probs)
    return np.sum(q * np.log(q) + (1.0 - q) * np.log1p(-q), axis=-1)


def loss_web(probs, web_label):
    """BCE against the one-hot web label: the label is the only positive."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= web_label < probs.shape[-1]:
        raise IndexError(f"web_label {web_label} out of range for {probs.shape[-1]} classes")
    return float(bce_rows(probs, one_hot(web_label, probs.shape[-1])))


def loss_self(probs, self_label):
    """BCE against a soft target vector (a pretrained model's prediction)."""
    probs = np.asarray(probs, dtype=np.float64)
    self_label = np.asarray(self_label, dtype=np.float64)
    if probs.shape != self_label.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {self_label.shape}")
    return float(bce_rows(probs, self_label))


def loss_combined(probs, web_label, self_label, c):
    """Confidence-balanced blend of web and self losses."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"confidence c must be in [0, 1], got {c}")
    l_w = loss_web(probs, web_label)
    l_s = loss_self(probs, self_label)
    return LossBreakdown(l_w=l_w, l_s=l_s, c=c, total=c * l_w + (1.0 - c) * l_s)


def loss_label_smoothing(probs, web_label, epsilon):
    """BCE against the smoothed one-hot target."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    probs = np.asarray(probs, dtype=np.float64)
    return float(bce_rows(probs, smoothed_one_hot(web_label, probs.shape[-1], epsilon)))


def loss_entropy_reg(probs, web_label, weight):
    """Web loss plus a saturation penalty (negative per-class entropy)."""
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    probs = np.asarray(probs, dtype=np.float64)
    return loss_web(probs, web_label) + weight * float(neg_entropy_rows(probs))


def loss_consistency(probs_a, probs_b):
    """Mean squared difference between two probability vectors (no clamping)."""
    probs_a = np.asarray(probs_a, dtype=np.float64)
    probs_b = np.asarray(probs_b, dtype=np.float64)
    if probs_a.shape != probs_b.shape:
        raise ValueError(f"shape mismatch: {probs_a.shape} vs {probs_b.shape}")
    return float(np.mean((probs_a - probs_b) ** 2))


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------

def bce_dz2(probs, targets):
    """d(per-row BCE)/d(logits), honoring the clamp (zero where it binds)."""
    q = _clamp(probs)
    dq = -targets / q + (1.0 - targets) / (1.0 - q)
    inside = (probs > EPS) & (probs < 1.0 - EPS)
    return dq * inside * probs * (1.0 - probs)


def neg_entropy_dz2(probs):
    q = _clamp(probs)
    dq = np.log(q) - np.log1p(-q)
    inside = (probs > EPS) & (probs < 1.0 - EPS)
    return dq * inside * probs * (1.0 - probs)


def backprop(model, cache, dz2):
    """Chain a (n, C) logit gradient back to parameter gradients."""
    dw2 = cache.hidden.T @ dz2
    db2 = dz2.sum(axis=0)
    da = dz2 @ model.w2.T
    if cache.mask is not None:
        da = da * cache.mask / (1.0 - model.dropout_rate)
    dz1 = da * (cache.z1 > 0.0)
    dw1 = cache.x.T @ dz1
    db1 = dz1.sum(axis=0)
    return Gradients(dw1, db1, dw2, db2)


@dataclass
class LossSpec:
    """Names one of the implemented losses together with its targets.

    kind: 'web' | 'self' | 'combined' | 'label_smoothing' | 'entropy_reg'
          | 'consistency'
    For 'consistency', ``x_other`` is the second view; the loss compares the
    model's predictions on x and x_other.
    """

    kind: str
    web_label: Optional[int] = None
    self_label: Optional[np.ndarray] = None
    c: Optional[float] = None
    epsilon: float = 0.1
    weight: float = 0.1
    x_other: Optional[np.ndarray] = None


def loss_value(model, x, spec):
    """Eval-mode forward followed by the loss named in ``spec``."""
    probs = forward(model, x, mode="eval")
    kind = spec.kind
    if kind == "web":
        return loss_web(probs, spec.web_label)
    if kind == "self":
        return loss_self(probs, spec.self_label)
    if kind == "combined":
        return loss_combined(probs, spec.web_label, spec.self_label, spec.c).total
    if kind == "label_smoothing":
        return loss_label_smoothing(probs, spec.web_label, spec.epsilon)
    if kind == "entropy_reg":
        return loss_entropy_reg(probs, spec.web_label, spec.weight)
    if kind == "consistency":
        probs_b = forward(model, spec.x_other, mode="eval")
        return loss_consistency(probs, probs_b)
    raise ValueError(f"unknown loss kind {spec.kind!r}")


def backward(model, x, spec):
    """Analytic parameter gradients of the loss named in ``spec`` at sample x.

    Deterministic (eval-mode forward, no dropout).
    """
    x = np.asarray(x, dtype=np.float64)
    xb = x[None, :] if x.ndim == 1 else x
    probs, cache = batch_forward(model, xb)
    num_classes = probs.shape[1]
    kind = spec.kind

    if kind == "consistency":
        xo = np.asarray(spec.x_other, dtype=np.float64)
        xob = xo[None, :] if xo.ndim == 1 else xo
        probs_b, cache_b = batch_forward(model, xob)
        diff = probs - probs_b
        scale = 2.0 / diff.size
        dz2_a = scale * diff * probs * (1.0 - probs)
        dz2_b = -scale * diff * probs_b * (1.0 - probs_b)
        grads = backprop(model, cache, dz2_a)
        return grads.add_scaled(backprop(model, cache_b, dz2_b))

    if kind == "web":
        targets = one_hot(spec.web_label, num_classes)[None, :]
        dz2 = bce_dz2(probs, targets)
    elif kind == "self":
        targets = np.asarray(spec.self_label, dtype=np.float64)[None, :]
        dz2 = bce_dz2(probs, targets)
    elif kind == "combined":
        y = one_hot(spec.web_label, num_classes)[None, :]
        q = np.asarray(spec.self_label, dtype=np.float64)[None, :]
        dz2 = spec.c * bce_dz2(probs, y) + (1.0 - spec.c) * bce_dz2(probs, q)
    elif kind == "label_smoothing":
        targets = smoothed_one_hot(spec.web_label, num_classes, spec.epsilon)[None, :]
        dz2 = bce_dz2(probs, targets)
    elif kind == "entropy_reg":
        targets = one_hot(spec.web_label, num_classes)[None, :]
        dz2 = bce_dz2(probs, targets) + spec.weight * neg_entropy_dz2(probs)
    else:
        raise ValueError(f"unknown loss kind {spec.kind!r}")
    return backprop(model, cache, dz2)


@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_param: str
    n_params: int


def gradient_check(model, x, spec, step=1e-5):
    """Compare analytic gradients with central finite differences.

    Relative error per coordinate is |g - g_fd| / max(|g|, |g_fd|, 1e-6);
    the report carries the maximum over all parameters.
    """
    analytic = backward(model, x, spec)
    probe = model.copy()
    max_rel = 0.0
    worst = ""
    total = 0
    for name in PARAM_NAMES:
        arr = getattr(probe, name)
        flat = arr.ravel()
        gflat = getattr(analytic, name).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_value(probe, x, spec)
            flat[i] = orig - step
            lm = loss_value(probe, x, spec)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-6)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
            total += 1
    return GradientCheckReport(max_rel_error=max_rel, worst_param=worst, n_params=total)


# ---------------------------------------------------------------------------
# Checkpoints: versioned text files, lossless float64 round-trip.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "scclab-mlp"
_CKPT_VERSION = "v1"


def _write_block(fh, model):
    d, h, c = model.layer_sizes
    fh.write(f"layers {d} {h} {c}\n")
    fh.write(f"dropout {model.dropout_rate:.17g}\n")
    for name in PARAM_NAMES:
        arr = np.atleast_2d(getattr(model, name))
        for row in arr:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_checkpoint(models, path):
    """Write one or more models to a text checkpoint."""
    if isinstance(models, MlpModel):
        models = [models]
    with open(path, "w") as fh:
        fh.write(f"{_CKPT_MAGIC} {_CKPT_VERSION} models={len(models)}\n")
        for model in models:
            _write_block(fh, model)


def load_checkpoint(path):
    """Read a checkpoint; always returns a list of models."""
    with open(path) as fh:
        header = fh.readline().split()
        if (
            len(header) != 3
            or header[0] != _CKPT_MAGIC
            or header[1] != _CKPT_VERSION
            or not header[2].startswith("models=")
        ):
            raise ValueError(f"{path}: not a {_CKPT_MAGIC} {_CKPT_VERSION} checkpoint")
        count = int(header[2].removeprefix("models="))
        models = []
        for _ in range(count):
            shape_line = fh.readline().split()
            if len(shape_line) != 4 or shape_line[0] != "layers":
                raise ValueError(f"{path}: malformed layer-shape line {shape_line!r}")
            d, h, c = (int(v) for v in shape_line[1:])
            drop_line = fh.readline().split()
            if len(drop_line) != 2 or drop_line[0] != "dropout":
                raise ValueError(f"{path}: malformed dropout line {drop_line!r}")
            dropout = float(drop_line[1])

            def read_rows(rows, cols):
                out = np.empty((rows, cols))
                for r in range(rows):
                    vals = fh.readline().split()
                    if len(vals) != cols:
                        raise ValueError(
                            f"{path}: expected {cols} values in parameter row, got {len(vals)}"
                        )
                    out[r] = [float(v) for v in vals]
                return out

            models.append(MlpModel(
                w1=read_rows(d, h),
                b1=read_rows(1, h)[0],
                w2=read_rows(h, c),
                b2=read_rows(1, c)[0],
                dropout_rate=dropout,
            ))
    return models


def load_model(path):
    """Read a single-model checkpoint."""
    models = load_checkpoint(path)
    if len(models) != 1:
        raise ValueError(f"{path}: expected 1 model, found {len(models)}")
    return models[0]
