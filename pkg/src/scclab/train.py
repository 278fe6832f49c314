"""Two-stage training loop.

Stage 1 pretrains on web labels with a selectable regularizer; from the
pretrained model we extract self labels (its soft predictions), hidden
features, and a per-sample confidence (the predicted probability at the web
label index). Stage 2 re-trains from the pretrained weights with a
confidence-balanced blend of web-label and self-label losses. All randomness
flows from named deterministic streams derived from the config seed.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import net
from .datasets import SchemaError

REGULARIZERS = (
    "vanilla", "label_smoothing", "entropy_reg", "mc_dropout", "mixup", "ensemble",
)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    initial_lr: float = 0.1
    warmup_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    regularizer: str = "vanilla"
    mixup_alpha: float = 0.2
    ensemble_size: int = 5
    dropout_rate: float = 0.5
    mc_passes: int = 50
    class_reweighting: bool = True
    hidden_units: int = 64
    entropy_weight: float = 0.1
    smoothing_epsilon: float = 0.1
    consistency_weight: float = 1.0
    jitter_sigma: float = 0.1
    seed: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(
                f"unknown regularizer {self.regularizer!r}, expected one of {REGULARIZERS}"
            )
        for name in ("momentum", "weight_decay", "mixup_alpha", "entropy_weight",
                     "consistency_weight", "jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.smoothing_epsilon < 1:
            raise ValueError(
                f"smoothing_epsilon must be in [0, 1), got {self.smoothing_epsilon}"
            )
        if self.ensemble_size < 1:
            raise ValueError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        if self.mc_passes < 1:
            raise ValueError(f"mc_passes must be >= 1, got {self.mc_passes}")
        if self.hidden_units < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        return self


def rng_stream(seed, name, index=0):
    """Named deterministic RNG stream derived from a run seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), int(index)])
    )


def derive_seed(seed, name, index=0):
    """Stable child seed for sub-runs (e.g. ensemble members)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), int(index)])
    return int(ss.generate_state(1)[0])


def lr_at(config, epoch):
    """Learning rate at an epoch: linear warmup, then cosine decay.

    Warmup reaches ``initial_lr`` at epoch ``warmup_epochs - 1``; afterwards
    ``0.5 * initial_lr * (1 + cos(pi * (t - W)/(L - W)))``.
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    w = config.warmup_epochs
    if epoch < w:
        return config.initial_lr * (epoch + 1) / w
    span = config.epochs - w
    return 0.5 * config.initial_lr * (1.0 + math.cos(math.pi * (epoch - w) / span))


def sgd_step(model, grads, lr, momentum, weight_decay, velocity):
    """One SGD-with-momentum update, in place.

    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    Weight decay is applied to weight matrices only, never to biases.
    Returns (model, velocity) for chaining.
    """
    for name in net.PARAM_NAMES:
        param = getattr(model, name)
        grad = getattr(grads, name)
        vel = getattr(velocity, name)
        if param.shape != grad.shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != param {param.shape}")
        decay = weight_decay if name in ("w1", "w2") else 0.0
        vel *= momentum
        vel += grad + decay * param
        param -= lr * vel
    return model, velocity


def class_weights(ds):
    """Inverse web-label frequency, normalized to mean 1 over classes."""
    counts = np.bincount(ds.web_labels, minlength=ds.num_classes)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"classes with no samples: {empty.tolist()}")
    return (len(ds) / ds.num_classes) / counts.astype(np.float64)


def mixup_batch(x, targets, alpha, rng, sample_weight=None, lam=None):
    """Convexly combine each sample with a permuted partner.

    One Beta(alpha, alpha) coefficient is drawn per pair; inputs, targets and
    (if given) sample weights are mixed with the same coefficient. ``lam``
    overrides the draw (scalar or per-pair vector), mainly for tests.
    """
    if alpha <= 0 and lam is None:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    n = x.shape[0]
    perm = rng.permutation(n)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    lam_col = lam[:, None]
    x_mixed = lam_col * x + (1.0 - lam_col) * x[perm]
    t_mixed = lam_col * targets + (1.0 - lam_col) * targets[perm]
    if sample_weight is None:
        return x_mixed, t_mixed, None
    w_mixed = lam * sample_weight + (1.0 - lam) * sample_weight[perm]
    return x_mixed, t_mixed, w_mixed


@dataclass
class LogRow:
    epoch: int
    lr: float
    train_loss: float
    clean_test_acc: float


@dataclass
class TrainResult:
    models: list
    log: list

    @property
    def model(self):
        return self.models[0]


@dataclass
class StageOneArtifacts:
    """Everything stage 2 consumes, frozen at extraction time."""

    model: net.MlpModel
    self_labels: np.ndarray          # (n, C) soft predictions of the pretrained model
    features: np.ndarray             # (n, h) hidden representations
    scc: np.ndarray                  # (n,) confidence at the web-label index
    web_labels: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None


def _top1(model, test_ds):
    probs = net.forward(model, test_ds.features)
    return float(np.mean(np.argmax(probs, axis=1) == test_ds.true_labels))


def _run_sgd(model, n, config, batch_step, test_ds):
    velocity = net.Gradients.zeros_like(model)
    shuffle_rng = rng_stream(config.seed, "shuffle")
    log = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_step(model, idx)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss!r} at epoch {epoch}")
            sgd_step(model, grads, lr, config.momentum, config.weight_decay, velocity)
            total += loss
            batches += 1
        acc = _top1(model, test_ds) if test_ds is not None and len(test_ds) else float("nan")
        log.append(LogRow(epoch, lr, total / batches, acc))
    return log


def _one_hot_matrix(labels, num_classes):
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _sample_weights(ds, config):
    if not config.class_reweighting:
        return np.ones(len(ds))
    return class_weights(ds)[ds.web_labels]


def _bce_step(config, x, targets, weights, entropy_weight, train_mode, drop_rng,
              mix_rng, loss_rows_fn=None):
    """Builds the per-batch (loss, grads) closure shared by both stages.

    ``loss_rows_fn(probs, idx)``, when given, computes the logged per-sample
    loss (stage 2 reports the exact c*l_w + (1-c)*l_s decomposition); the
    gradient always comes from ``targets``.
    """
    use_mixup = config.regularizer == "mixup"

    def step(model, idx):
        xb = x[idx]
        tb = targets[idx]
        wb = weights[idx]
        mixed = False
        if use_mixup:
            xb, tb, wb = mixup_batch(xb, tb, config.mixup_alpha, mix_rng, wb)
            mixed = True
        probs, cache = net.batch_forward(model, xb, train_mode=train_mode, rng=drop_rng)
        if loss_rows_fn is not None and not mixed:
            rows = loss_rows_fn(probs, idx)
        else:
            rows = net.bce_rows(probs, tb)
        dz2 = net.bce_dz2(probs, tb)
        if entropy_weight > 0.0:
            rows = rows + entropy_weight * net.neg_entropy_rows(probs)
            dz2 = dz2 + entropy_weight * net.neg_entropy_dz2(probs)
        loss = float(np.mean(wb * rows))
        dz2 *= (wb / len(idx))[:, None]
        grads = net.backprop(model, cache, dz2)
        return loss, grads

    return step


def pretrain(ds, config, test_ds=None):
    """Stage 1: train from random init on web labels with the configured
    regularizer. Returns a TrainResult; ensembles hold ``ensemble_size``
    models trained with member-derived seeds (the log is member 0's).
    """
    config.validate()
    if config.regularizer == "ensemble":
        models, log = [], []
        for member in range(config.ensemble_size):
            sub = replace(
                config,
                regularizer="vanilla",
                seed=derive_seed(config.seed, "ensemble-member", member),
            )
            result = pretrain(ds, sub, test_ds if member == 0 else None)
            models.append(result.model)
            if member == 0:
                log = result.log
        return TrainResult(models, log)

    reg = config.regularizer
    model = net.init_model(
        ds.dimension, config.hidden_units, ds.num_classes,
        rng_stream(config.seed, "init"),
        dropout_rate=config.dropout_rate if reg == "mc_dropout" else 0.0,
    )
    if reg == "label_smoothing":
        eps = config.smoothing_epsilon
        targets = _one_hot_matrix(ds.web_labels, ds.num_classes)
        targets = targets * (1.0 - 2.0 * eps) + eps
    else:
        targets = _one_hot_matrix(ds.web_labels, ds.num_classes)
    step = _bce_step(
        config,
        x=ds.features,
        targets=targets,
        weights=_sample_weights(ds, config),
        entropy_weight=config.entropy_weight if reg == "entropy_reg" else 0.0,
        train_mode=(reg == "mc_dropout"),
        drop_rng=rng_stream(config.seed, "dropout"),
        mix_rng=rng_stream(config.seed, "mixup"),
    )
    log = _run_sgd(model, len(ds), config, step, test_ds)
    return TrainResult([model], log)


def extract(ds, models, config):
    """Eval the pretrained model(s) on every sample, without augmentation.

    Self labels are the (ensemble- or MC-averaged) per-class probabilities;
    confidence is the probability at each sample's web label; features are
    the hidden activations feeding the output layer.
    """
    if isinstance(models, net.MlpModel):
        models = [models]
    if not models:
        raise ValueError("no models to extract from")
    x = ds.features
    if models[0].w1.shape[0] != ds.dimension:
        raise ValueError(
            f"model expects dimension {models[0].w1.shape[0]}, dataset has {ds.dimension}"
        )

    if config.regularizer == "mc_dropout" and models[0].dropout_rate > 0.0:
        model = models[0]
        rng = rng_stream(config.seed, "mc-eval")
        acc = np.zeros((len(ds), ds.num_classes))
        for _ in range(config.mc_passes):
            acc += net.forward(model, x, mode="train", rng=rng)
        probs = acc / config.mc_passes
        feats = net.hidden_features(model, x)
    elif len(models) == 1:
        probs = net.forward(models[0], x)
        feats = net.hidden_features(models[0], x)
    else:
        probs = np.mean([net.forward(m, x) for m in models], axis=0)
        feats = np.mean([net.hidden_features(m, x) for m in models], axis=0)

    scc = probs[np.arange(len(ds)), ds.web_labels]
    return StageOneArtifacts(
        model=models[0].copy(),
        self_labels=probs,
        features=feats,
        scc=scc,
        web_labels=ds.web_labels.copy(),
        ids=ds.ids.copy(),
    )


def _check_artifacts(ds, artifacts):
    n = len(ds)
    if artifacts.self_labels.shape != (n, ds.num_classes):
        raise ValueError(
            f"self labels shaped {artifacts.self_labels.shape}, "
            f"expected ({n}, {ds.num_classes})"
        )
    if artifacts.scc.shape != (n,):
        raise ValueError(f"confidence vector length {artifacts.scc.shape}, expected ({n},)")
    if np.any(artifacts.scc < 0) or np.any(artifacts.scc > 1):
        raise ValueError("confidence values must lie in [0, 1]")
    if artifacts.ids is not None and not np.array_equal(artifacts.ids, ds.ids):
        raise ValueError("artifact ids do not match dataset ids")


def finetune(ds, artifacts, config, test_ds=None):
    """Stage 2: start from the pretrained weights and minimize the per-sample
    blend c*L_web + (1-c)*L_self with static self labels and confidences.
    """
    config.validate()
    if config.regularizer == "ensemble":
        raise ValueError("the ensemble regularizer applies to pretraining only")
    _check_artifacts(ds, artifacts)

    reg = config.regularizer
    model = artifacts.model.copy()
    model.dropout_rate = config.dropout_rate if reg == "mc_dropout" else 0.0

    y = _one_hot_matrix(ds.web_labels, ds.num_classes)
    if reg == "label_smoothing":
        eps = config.smoothing_epsilon
        y = y * (1.0 - 2.0 * eps) + eps
    p = np.asarray(artifacts.self_labels, dtype=np.float64)
    c = np.asarray(artifacts.scc, dtype=np.float64)
    c_col = c[:, None]
    targets = c_col * y + (1.0 - c_col) * p

    def loss_rows(probs, idx):
        # Exact c*l_w + (1-c)*l_s decomposition for the logged loss.
        l_w = net.bce_rows(probs, y[idx])
        l_s = net.bce_rows(probs, p[idx])
        return c[idx] * l_w + (1.0 - c[idx]) * l_s

    step = _bce_step(
        config,
        x=ds.features,
        targets=targets,
        weights=_sample_weights(ds, config),
        entropy_weight=config.entropy_weight if reg == "entropy_reg" else 0.0,
        train_mode=(reg == "mc_dropout"),
        drop_rng=rng_stream(config.seed, "dropout"),
        mix_rng=rng_stream(config.seed, "mixup"),
        loss_rows_fn=loss_rows,
    )
    log = _run_sgd(model, len(ds), config, step, test_ds)
    return TrainResult([model], log)


def finetune_constant(ds, artifacts, c, config, test_ds=None):
    """Stage 2 with every sample's confidence replaced by the constant ``c``."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"constant confidence must be in [0, 1], got {c}")
    flat = replace(artifacts, scc=np.full(len(ds), float(c)))
    return finetune(ds, flat, config, test_ds)


def train_consistency_baseline(ds, config, test_ds=None):
    """End-to-end baseline: web loss plus a prediction-consistency penalty
    between two Gaussian-jittered views of each input.

    With ``consistency_weight == 0`` this is exactly vanilla pretraining.
    """
    config.validate()
    if config.consistency_weight == 0.0:
        return pretrain(ds, replace(config, regularizer="vanilla"), test_ds)

    model = net.init_model(
        ds.dimension, config.hidden_units, ds.num_classes,
        rng_stream(config.seed, "init"),
    )
    x = ds.features
    targets = _one_hot_matrix(ds.web_labels, ds.num_classes)
    weights = _sample_weights(ds, config)
    jitter_rng = rng_stream(config.seed, "jitter")
    sigma = config.jitter_sigma
    cw = config.consistency_weight

    def step(model, idx):
        xb = x[idx]
        probs, cache = net.batch_forward(model, xb)
        dz2 = net.bce_dz2(probs, targets[idx]) * (weights[idx] / len(idx))[:, None]
        loss = float(np.mean(weights[idx] * net.bce_rows(probs, targets[idx])))
        grads = net.backprop(model, cache, dz2)

        view_a = xb + sigma * jitter_rng.standard_normal(xb.shape)
        view_b = xb + sigma * jitter_rng.standard_normal(xb.shape)
        pa, cache_a = net.batch_forward(model, view_a)
        pb, cache_b = net.batch_forward(model, view_b)
        diff = pa - pb
        loss += cw * float(np.mean(diff ** 2))
        scale = cw * 2.0 / diff.size
        grads.add_scaled(net.backprop(model, cache_a, scale * diff * pa * (1.0 - pa)))
        grads.add_scaled(net.backprop(model, cache_b, -scale * diff * pb * (1.0 - pb)))
        return loss, grads

    log = _run_sgd(model, len(ds), config, step, test_ds)
    return TrainResult([model], log)


# ---------------------------------------------------------------------------
# Persistence: artifacts directory, training log, key = value config files.
# ---------------------------------------------------------------------------

def _write_matrix_csv(path, ids, matrix, prefix):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"{prefix}{j}" for j in range(matrix.shape[1])])
        for i in range(matrix.shape[0]):
            writer.writerow([int(ids[i])] + [f"{v:.17g}" for v in matrix[i]])


def _read_matrix_csv(path, prefix):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or header[1:] != [
            f"{prefix}{j}" for j in range(len(header) - 1)
        ]:
            raise SchemaError(f"{path}: bad header {header!r}", line=1)
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}: expected {len(header)} columns, got {len(row)}", line=lineno
                )
            ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64)


def save_artifacts(artifacts, outdir, suffix=""):
    """Write the artifacts directory files.

    The unsuffixed call writes checkpoint.txt, features.csv, self_labels.csv
    and scc.csv; a suffixed call (graph smoothing) adds only the
    self_labels{suffix}.csv / scc{suffix}.csv pair.
    """
    outdir = str(outdir)
    if suffix == "":
        net.save_checkpoint(artifacts.model, f"{outdir}/checkpoint.txt")
        _write_matrix_csv(f"{outdir}/features.csv", artifacts.ids, artifacts.features, "h")
    _write_matrix_csv(
        f"{outdir}/self_labels{suffix}.csv", artifacts.ids, artifacts.self_labels, "p"
    )
    with open(f"{outdir}/scc{suffix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "c"])
        for i in range(len(artifacts.scc)):
            writer.writerow([int(artifacts.ids[i]), f"{artifacts.scc[i]:.17g}"])


def load_scc_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "c"]:
            raise SchemaError(f"{path}: bad header {header!r}", line=1)
        ids, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise SchemaError(f"{path}: expected 2 columns, got {len(row)}", line=lineno)
            ids.append(int(row[0]))
            vals.append(float(row[1]))
    return np.asarray(ids, dtype=np.int64), np.asarray(vals, dtype=np.float64)


def load_artifacts(outdir, suffix="", ds=None):
    """Read an artifacts directory written by :func:`save_artifacts`.

    When ``ds`` is given, rows are checked to be in dataset order and web
    labels are filled in from it.
    """
    outdir = str(outdir)
    model = net.load_model(f"{outdir}/checkpoint.txt")
    feat_ids, features = _read_matrix_csv(f"{outdir}/features.csv", "h")
    label_ids, self_labels = _read_matrix_csv(f"{outdir}/self_labels{suffix}.csv", "p")
    scc_ids, scc = load_scc_csv(f"{outdir}/scc{suffix}.csv")
    if not (np.array_equal(feat_ids, label_ids) and np.array_equal(label_ids, scc_ids)):
        raise ValueError(f"{outdir}: artifact files disagree on sample ids")
    web_labels = None
    if ds is not None:
        if not np.array_equal(scc_ids, ds.ids):
            raise ValueError(f"{outdir}: artifact ids do not match the dataset")
        web_labels = ds.web_labels.copy()
    return StageOneArtifacts(
        model=model,
        self_labels=self_labels,
        features=features,
        scc=scc,
        web_labels=web_labels,
        ids=scc_ids,
    )


def save_train_log(log, path):
    """CSV log, one row per epoch: epoch,lr,train_loss,clean_test_acc."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "clean_test_acc"])
        for row in log:
            writer.writerow([
                row.epoch, f"{row.lr:.9g}", f"{row.train_loss:.9g}",
                f"{row.clean_test_acc:.9g}",
            ])


def config_to_dict(config):
    return {f.name: getattr(config, f.name) for f in fields(TrainConfig)}


def config_from_dict(values, base=None):
    """Build a TrainConfig from string or native values; unknown keys are
    rejected so typos in config files fail loudly."""
    config = base if base is not None else TrainConfig()
    known = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(config, key)
        if isinstance(value, str):
            if isinstance(current, bool):
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(f"{key}: expected a boolean, got {value!r}")
                value = value.lower() in ("true", "1")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
        updates[key] = value
    return replace(config, **updates).validate()


def write_kv(values, path, comments=()):
    """Flat ``key = value`` file (the run-config / manifest format)."""
    with open(path, "w") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        for key, value in values.items():
            fh.write(f"{key} = {value}\n")


def read_kv(path):
    """Parse a flat ``key = value`` file; '#' lines are comments."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values
