"""Regression metrics and histogram-based distribution-shift diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from udama.errors import ContractViolation

METRIC_NAMES = ("r2", "corr", "mse", "mae")
DEFAULT_BINS = 20


def compute_metrics(pred, truth) -> dict[str, float]:
    """R², Pearson correlation, MSE and MAE of ``pred`` against ``truth``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractViolation(f"pred has {pred.size} values, truth {truth.size}")
    if truth.size < 2:
        raise ContractViolation("need at least two samples")
    resid = truth - pred
    tc = truth - truth.mean()
    ss_tot = float(tc @ tc)
    if ss_tot == 0.0:
        raise ContractViolation("truth is constant; R² and correlation are undefined")
    pc = pred - pred.mean()
    ss_pred = float(pc @ pc)
    corr = float(pc @ tc) / math.sqrt(ss_pred * ss_tot) if ss_pred > 0 else 0.0
    return {
        "r2": 1.0 - float(resid @ resid) / ss_tot,
        "corr": float(np.clip(corr, -1.0, 1.0)),
        "mse": float(np.mean(resid * resid)),
        "mae": float(np.mean(np.abs(resid))),
    }


def label_histogram(samples, bins: int, range_: tuple[float, float]) -> np.ndarray:
    """Equal-width histogram over ``range_`` normalised to probabilities.

    Samples outside the range are clipped into the edge bins.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ContractViolation("histogram of no samples")
    lo, hi = range_
    if bins < 2 or not lo < hi:
        raise ContractViolation(f"need bins >= 2 and lo < hi, got bins={bins}, range={range_}")
    idx = np.floor((samples - lo) / (hi - lo) * bins).astype(np.int64)
    counts = np.bincount(np.clip(idx, 0, bins - 1), minlength=bins).astype(np.float64)
    return counts / counts.sum()


def hellinger(p, q) -> float:
    """Hellinger distance between two probability vectors, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.size == 0:
        raise ContractViolation("probability vectors must be non-empty and equally long")
    d = np.sqrt(p) - np.sqrt(q)
    return float(min(math.sqrt(float(d @ d) / 2.0), 1.0))


def shared_histograms(p_samples, q_samples, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray, tuple[float, float]]:
    """Histograms of both sample sets over the range of their union."""
    p_samples = np.asarray(p_samples, dtype=np.float64).reshape(-1)
    q_samples = np.asarray(q_samples, dtype=np.float64).reshape(-1)
    if p_samples.size == 0 or q_samples.size == 0:
        raise ContractViolation("hellinger distance needs two non-empty sample sets")
    both = np.concatenate([p_samples, q_samples])
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        hi = lo + 1.0
    return label_histogram(p_samples, bins, (lo, hi)), label_histogram(q_samples, bins, (lo, hi)), (lo, hi)


def hellinger_distance(p_samples, q_samples, bins: int = DEFAULT_BINS) -> float:
    p, q, _ = shared_histograms(p_samples, q_samples, bins)
    return hellinger(p, q)


@dataclass
class MetricsReport:
    """Mean and population standard deviation of every metric across folds."""

    method: str
    r2: tuple[float, float]
    corr: tuple[float, float]
    mse: tuple[float, float]
    mae: tuple[float, float]
    hellinger: tuple[float, float]
    n_folds: int
    folds: list[dict[str, float]] = field(default_factory=list)

    @classmethod
    def from_folds(cls, method: str, folds: list[dict[str, float]]) -> "MetricsReport":
        if not folds:
            raise ContractViolation("no folds to aggregate")
        agg = {}
        for key in (*METRIC_NAMES, "hellinger"):
            vals = np.array([f[key] for f in folds])
            agg[key] = (float(vals.mean()), float(vals.std()))
        return cls(method=method, n_folds=len(folds), folds=list(folds), **agg)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_folds": self.n_folds,
            **{k: {"mean": getattr(self, k)[0], "std": getattr(self, k)[1]}
               for k in (*METRIC_NAMES, "hellinger")},
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            method=d["method"],
            n_folds=d["n_folds"],
            folds=d.get("folds", []),
            **{k: (d[k]["mean"], d[k]["std"]) for k in (*METRIC_NAMES, "hellinger")},
        )
