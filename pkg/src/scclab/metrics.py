"""Confidence-quality metrics and evaluation helpers.

Confidences are scored against binary correctness flags v (1 = the web label
was right). Besides plain MSE, two bin-based metrics are computed over the
M half-open intervals ((m-1)/M, m/M]: the expected calibration error (mean
|reliability - confidence| gap, sample-weighted) and the over-confidence
error, which punishes confident bins whose reliability falls short.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from . import net, train


@dataclass
class CalibrationReport:
    """Per-bin statistics plus the three scalar metrics.

    ``conf`` / ``rel`` are nan for empty bins; empty bins carry zero weight.
    """

    m_bins: int
    counts: np.ndarray
    conf: np.ndarray
    rel: np.ndarray
    mse: float
    ece: float
    oce: float
    n: int

    def bins(self):
        """List of (count, conf, rel) triples, one per bin."""
        return [
            (int(self.counts[m]), float(self.conf[m]), float(self.rel[m]))
            for m in range(self.m_bins)
        ]


def _validate_vc(v, c):
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if v.shape != c.shape or v.ndim != 1:
        raise ValueError(f"v and c must be equal-length vectors, got {v.shape} and {c.shape}")
    if v.size == 0:
        raise ValueError("need at least one sample")
    if not np.all((v == 0) | (v == 1)):
        raise ValueError("v entries must be 0 or 1")
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return v, c


def mse(v, c):
    """Mean squared difference between confidences and correctness flags."""
    v, c = _validate_vc(v, c)
    return float(np.mean((v - c) ** 2))


def bin_indices(c, m_bins):
    """0-based bin index per confidence; bin m covers ((m-1)/M, m/M], and an
    exact 0 goes to the first bin."""
    edges = np.arange(m_bins + 1) / m_bins
    idx = np.searchsorted(edges, c, side="left")
    return np.clip(idx, 1, m_bins) - 1


def calibration_report(v, c, m_bins=100):
    """Bin the (v, c) pairs and compute all three metrics."""
    if m_bins < 1:
        raise ValueError(f"m_bins must be >= 1, got {m_bins}")
    v, c = _validate_vc(v, c)
    n = v.size
    idx = bin_indices(c, m_bins)
    counts = np.bincount(idx, minlength=m_bins)
    conf_sums = np.bincount(idx, weights=c, minlength=m_bins)
    rel_sums = np.bincount(idx, weights=v, minlength=m_bins)
    nonempty = counts > 0
    conf = np.full(m_bins, np.nan)
    rel = np.full(m_bins, np.nan)
    conf[nonempty] = conf_sums[nonempty] / counts[nonempty]
    rel[nonempty] = rel_sums[nonempty] / counts[nonempty]

    weight = counts[nonempty] / n
    gap = rel[nonempty] - conf[nonempty]
    ece_val = float(np.sum(weight * np.abs(gap)))
    oce_val = float(np.sum(weight * conf[nonempty] * np.maximum(-gap, 0.0)))
    return CalibrationReport(
        m_bins=m_bins,
        counts=counts,
        conf=conf,
        rel=rel,
        mse=float(np.mean((v - c) ** 2)),
        ece=ece_val,
        oce=oce_val,
        n=int(n),
    )


def ece(v, c, m_bins=100):
    """Expected calibration error; returns (value, full report)."""
    report = calibration_report(v, c, m_bins)
    return report.ece, report


def oce(v, c, m_bins=100):
    """Over-confidence error."""
    return calibration_report(v, c, m_bins).oce


def accuracy(model, test_ds):
    """(top-1, top-5) accuracy against true labels; probability ties break
    toward the lower class index."""
    probs = net.forward(model, test_ds.features)
    true = test_ds.true_labels
    top1 = float(np.mean(np.argmax(probs, axis=1) == true))
    # Stable sort of -probs keeps equal-probability classes in index order.
    order = np.argsort(-probs, axis=1, kind="stable")
    top5 = float(np.mean(np.any(order[:, :5] == true[:, None], axis=1)))
    return top1, top5


def reliability_trend(report):
    """Spearman rank correlation between bin index and reliability over the
    nonempty bins (positive = confidence tracks correctness)."""
    nonempty = report.counts > 0
    if np.sum(nonempty) < 2:
        return float("nan")
    rho, _ = spearmanr(np.flatnonzero(nonempty), report.rel[nonempty])
    return float(rho)


def sav_harness(ds, vanilla_artifacts, confidence, config, test_ds):
    """Finetune with the vanilla model's self labels but a substituted
    confidence vector; the resulting clean-test top-1 scores the confidence
    source behaviorally.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.shape != (len(ds),):
        raise ValueError(
            f"confidence vector shaped {confidence.shape}, expected ({len(ds)},)"
        )
    if np.any(confidence < 0) or np.any(confidence > 1):
        raise ValueError("confidence values must lie in [0, 1]")
    result = train.finetune(ds, replace(vanilla_artifacts, scc=confidence), config, test_ds)
    return accuracy(result.model, test_ds)[0]


def emit_reliability_csv(report, path):
    """Write ``bin_lo,bin_hi,count,conf,rel`` rows, one per bin (empty bins
    included with count 0)."""
    m = report.m_bins
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "conf", "rel"])
        for i in range(m):
            writer.writerow([
                f"{i / m:.17g}", f"{(i + 1) / m:.17g}", int(report.counts[i]),
                f"{report.conf[i]:.17g}", f"{report.rel[i]:.17g}",
            ])


def load_reliability_csv(path):
    """Rebuild a report from an emitted CSV (mse is not recoverable: nan)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["bin_lo", "bin_hi", "count", "conf", "rel"]:
            raise ValueError(f"{path}: bad header {header!r}")
        counts, confs, rels = [], [], []
        for row in reader:
            counts.append(int(row[2]))
            confs.append(float(row[3]))
            rels.append(float(row[4]))
    counts = np.asarray(counts)
    conf = np.asarray(confs)
    rel = np.asarray(rels)
    n = int(counts.sum())
    nonempty = counts > 0
    weight = counts[nonempty] / n
    gap = rel[nonempty] - conf[nonempty]
    return CalibrationReport(
        m_bins=len(counts),
        counts=counts,
        conf=conf,
        rel=rel,
        mse=float("nan"),
        ece=float(np.sum(weight * np.abs(gap))),
        oce=float(np.sum(weight * conf[nonempty] * np.maximum(-gap, 0.0))),
        n=n,
    )


def write_metrics_summary(rows, path):
    """Summary CSV: ``provider,mse,ece,oce,sav_top1``, one row per provider."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["provider", "mse", "ece", "oce", "sav_top1"])
        for name, m, e, o, sav in rows:
            writer.writerow([
                name, f"{m:.17g}", f"{e:.17g}", f"{o:.17g}", f"{sav:.17g}",
            ])
