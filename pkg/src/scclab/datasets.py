"""Synthetic stand-ins for webly-crawled datasets with controlled label noise.

Samples are Gaussian clusters around well-separated class centers. Each sample
carries two labels: ``web_label`` (what a crawler would have attached, possibly
corrupted) and ``true_label`` (hidden ground truth, used only for evaluation
and for building verification sets).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

NOISE_MODELS = ("uniform", "class_conditional", "neighborhood")

_CSV_FLOAT_DIGITS = 9  # features are quantized to this at generation time


class SchemaError(ValueError):
    """A persisted dataset file does not match the expected CSV schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class LabeledSample(NamedTuple):
    id: int
    features: np.ndarray
    web_label: int
    true_label: int


@dataclass
class SyntheticDataset:
    """Column-oriented dataset of labeled feature vectors.

    Attributes
    ----------
    features : (n, d) float64 array
    web_labels : (n,) int array, the (possibly noisy) training labels
    true_labels : (n,) int array, hidden ground truth
    ids : (n,) int array, unique and dense in [0, n)
    num_classes : number of classes C
    noise_rate : fraction of samples whose web label was flipped
    noise_model : one of NOISE_MODELS, or "none"
    rng_seed : seed the generator was called with
    """

    features: np.ndarray
    web_labels: np.ndarray
    true_labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    noise_rate: float = 0.0
    noise_model: str = "none"
    rng_seed: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.web_labels = np.asarray(self.web_labels, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dimension(self):
        return self.features.shape[1]

    def sample(self, i) -> LabeledSample:
        """Row view of sample ``i`` (positional index)."""
        return LabeledSample(
            int(self.ids[i]),
            self.features[i],
            int(self.web_labels[i]),
            int(self.true_labels[i]),
        )

    def flip_count(self):
        """Number of samples whose web label differs from the true label."""
        return int(np.sum(self.web_labels != self.true_labels))

    def __eq__(self, other):
        if not isinstance(other, SyntheticDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.noise_rate == other.noise_rate
            and self.noise_model == other.noise_model
            and self.rng_seed == other.rng_seed
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.web_labels, other.web_labels)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass
class VerificationSet:
    """Per-sample web-label correctness flags: v = 1 iff web == true label."""

    ids: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.int64)

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, VerificationSet):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.v, other.v)


def _quantize(x):
    # 9 significant digits, so the CSV serialization is lossless.
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    flat = np.array([float(f"{v:.{_CSV_FLOAT_DIGITS}g}") for v in x.ravel()])
    return flat.reshape(x.shape)


def _raw_centers(num_classes, dim, rng):
    # Unit one-hot directions pushed through a random rotation: center c is
    # the c-th column of a Haar-ish orthogonal matrix (QR of a Gaussian).
    gauss = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    return q[:, :num_classes].T.copy()


def class_centers(num_classes, dim, seed):
    """The (C, d) class centers a generator with this seed draws around.

    Quantized like generated features, so zero-spread samples sit exactly on
    these points.
    """
    rng = np.random.default_rng(seed)
    return _quantize(_raw_centers(num_classes, dim, rng))


def generate_clusters(num_classes, per_class, dim, spread, seed):
    """Draw ``num_classes * per_class`` samples from isotropic Gaussian clusters.

    Class centers are unit vectors (mutually orthogonal), so inter-class
    difficulty is controlled solely by ``spread``, the cluster standard
    deviation. Web labels start out equal to true labels; corrupt them with
    :func:`inject_noise`. Deterministic for a fixed seed.
    """
    train, _ = generate_train_test(num_classes, per_class, 0, dim, spread, seed)
    return train


def generate_train_test(num_classes, per_class, test_per_class, dim, spread, seed):
    """Like :func:`generate_clusters` plus a held-out pool from the same centers.

    The training part is bit-identical to ``generate_clusters`` called with the
    same arguments; the test pool is drawn afterwards from the same RNG stream,
    so (train, test) are disjoint draws from one mixture. Returns
    ``(train, test)``; test ids restart at 0.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if test_per_class < 0:
        raise ValueError(f"test_per_class must be >= 0, got {test_per_class}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if num_classes > dim:
        raise ValueError(
            f"num_classes ({num_classes}) must not exceed dim ({dim}): "
            "class centers are rotated one-hot directions"
        )
    if spread < 0:
        raise ValueError(f"spread must be >= 0, got {spread}")

    rng = np.random.default_rng(seed)
    centers = _raw_centers(num_classes, dim, rng)

    def draw(count_per_class):
        feats, labels = [], []
        for c in range(num_classes):
            pts = centers[c] + spread * rng.standard_normal((count_per_class, dim))
            feats.append(pts)
            labels.append(np.full(count_per_class, c, dtype=np.int64))
        features = _quantize(np.concatenate(feats)) if feats else np.zeros((0, dim))
        labels = np.concatenate(labels)
        n = len(labels)
        return SyntheticDataset(
            features=features,
            web_labels=labels.copy(),
            true_labels=labels.copy(),
            ids=np.arange(n, dtype=np.int64),
            num_classes=num_classes,
            rng_seed=seed,
        )

    return draw(per_class), draw(test_per_class)


def inject_noise(ds, model, rate, seed):
    """Flip the web label of exactly ``round(rate * n)`` samples.

    Intended for a clean dataset (web == true); the exact-count guarantee
    assumes flip targets can differ from the true label, which holds there.

    - ``uniform``: any wrong class, equiprobably.
    - ``class_conditional``: each class flips to a fixed confusion target
      derived from a seeded fixed-point-free permutation of the classes.
    - ``neighborhood``: each flipped sample inherits the web label of its
      nearest neighbor (Euclidean) with a different true label, emulating
      semantic ambiguity / search-engine bias.

    True labels and features are never modified. Returns a new dataset.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"noise rate must be in [0, 1), got {rate}")
    if model not in NOISE_MODELS:
        raise ValueError(f"unknown noise model {model!r}, expected one of {NOISE_MODELS}")

    n = len(ds)
    n_flip = int(round(rate * n))
    out = replace(
        ds,
        features=ds.features.copy(),
        web_labels=ds.web_labels.copy(),
        true_labels=ds.true_labels.copy(),
        ids=ds.ids.copy(),
        noise_rate=rate,
        noise_model=model,
    )
    if n_flip == 0:
        return out

    rng = np.random.default_rng(seed)
    flip_idx = rng.choice(n, size=n_flip, replace=False)
    c = ds.num_classes

    if model == "uniform":
        true = out.true_labels[flip_idx]
        # Uniform over the C-1 wrong classes: draw in [0, C-1) and skip true.
        draw = rng.integers(0, c - 1, size=n_flip)
        out.web_labels[flip_idx] = np.where(draw >= true, draw + 1, draw)
    elif model == "class_conditional":
        perm = rng.permutation(c)
        while np.any(perm == np.arange(c)):
            perm = rng.permutation(c)
        out.web_labels[flip_idx] = perm[out.true_labels[flip_idx]]
    else:  # neighborhood
        targets = _neighbor_labels(ds, flip_idx)
        out.web_labels[flip_idx] = targets
    return out


def _neighbor_labels(ds, flip_idx):
    # Web label (pre-flip snapshot) of the nearest sample with a different
    # true label, per flipped sample.
    x = ds.features
    targets = np.empty(len(flip_idx), dtype=np.int64)
    for k, i in enumerate(flip_idx):
        other = ds.true_labels != ds.true_labels[i]
        if not np.any(other):
            raise ValueError("neighborhood noise needs at least two true classes present")
        diffs = x[other] - x[i]
        nearest = np.argmin(np.einsum("ij,ij->i", diffs, diffs))
        targets[k] = ds.web_labels[np.flatnonzero(other)[nearest]]
    return targets


def build_verification_set(ds, per_class, seed):
    """Sample ``per_class`` entries per web-label class, without replacement.

    Each entry is (sample id, v) with v = 1 iff the web label matches the true
    label. Raises if any class has fewer than ``per_class`` members.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    ids, flags = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.web_labels == c)
        if len(members) < per_class:
            raise ValueError(
                f"class {c} has only {len(members)} samples, need {per_class}"
            )
        pick = rng.choice(members, size=per_class, replace=False)
        ids.append(ds.ids[pick])
        flags.append((ds.web_labels[pick] == ds.true_labels[pick]).astype(np.int64))
    return VerificationSet(ids=np.concatenate(ids), v=np.concatenate(flags))


def save_dataset(ds, path):
    """Write the dataset CSV: header ``id,true_label,web_label,f0,...,f{d-1}``."""
    d = ds.dimension
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "true_label", "web_label"] + [f"f{j}" for j in range(d)])
        for i in range(len(ds)):
            row = [int(ds.ids[i]), int(ds.true_labels[i]), int(ds.web_labels[i])]
            row += [f"{v:.{_CSV_FLOAT_DIGITS}g}" for v in ds.features[i]]
            writer.writerow(row)


def load_dataset(path, num_classes=None, noise_rate=0.0, noise_model="none", rng_seed=0):
    """Read a dataset CSV written by :func:`save_dataset`.

    ``num_classes`` defaults to ``max(label) + 1`` over both label columns.
    Raises :class:`SchemaError` (with the offending line number) on a bad
    header, wrong column count, or unparsable values.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file", line=1) from None
        if header[:3] != ["id", "true_label", "web_label"] or len(header) < 4:
            raise SchemaError(f"{path}: bad header {header!r}", line=1)
        d = len(header) - 3
        if header[3:] != [f"f{j}" for j in range(d)]:
            raise SchemaError(f"{path}: bad feature columns in header", line=1)

        ids, true_labels, web_labels, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 3:
                raise SchemaError(
                    f"{path}: expected {d + 3} columns, got {len(row)}", line=lineno
                )
            try:
                ids.append(int(row[0]))
                true_labels.append(int(row[1]))
                web_labels.append(int(row[2]))
                feats.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise SchemaError(f"{path}: {exc}", line=lineno) from None

    n = len(ids)
    if num_classes is None:
        num_classes = int(max(max(true_labels, default=0), max(web_labels, default=0))) + 1
    return SyntheticDataset(
        features=np.asarray(feats, dtype=np.float64).reshape(n, d),
        web_labels=web_labels,
        true_labels=true_labels,
        ids=ids,
        num_classes=num_classes,
        noise_rate=noise_rate,
        noise_model=noise_model,
        rng_seed=rng_seed,
    )


def save_verification(vs, path):
    """Write the verification CSV: header ``id,v``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "v"])
        for i in range(len(vs)):
            writer.writerow([int(vs.ids[i]), int(vs.v[i])])


def load_verification(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "v"]:
            raise SchemaError(f"{path}: bad header {header!r}", line=1)
        ids, flags = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise SchemaError(f"{path}: expected 2 columns, got {len(row)}", line=lineno)
            try:
                ids.append(int(row[0]))
                flags.append(int(row[1]))
            except ValueError as exc:
                raise SchemaError(f"{path}: {exc}", line=lineno) from None
    return VerificationSet(ids=ids, v=flags)
