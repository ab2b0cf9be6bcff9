"""Synthetic silver/gold-standard cohorts and the wearable preprocessing pipeline.

Each simulated participant has a latent fitness level. A minute-level
stream of heart rate and acceleration intensity is drawn so that fitter
participants have lower resting heart rate, a smaller heart-rate response
per MET and more moderate/vigorous activity. The stream then goes through
the same preprocessing a real recording would: heart-rate noise filter,
non-wear detection, minimum-wear check, 15-minute epochs and a fixed
26-column feature matrix truncated or padded to 600 epochs.

Feature columns (``FEATURE_NAMES``), all computed over worn minutes of the
epoch and divided by the constants in ``FEATURE_SCALES``:

====  =================  ==============================================
 0-3  hr_mean/max/min/std  heart rate, bpm / 100
 4-7  acc_mean/max/min/std acceleration intensity, J/min/kg / 100
 8-9  met_mean/max         METs (intensity / 71) / 5
10-13 class_*              one-hot intensity class of met_mean
14-17 minute_sin/cos,      cyclical time of the epoch start
      day_sin/cos
18-21 frac_*               fraction of minutes in each intensity class
  22  wear_fraction        worn minutes / 15
  23  hr_per_met           hr_mean / max(met_mean, 1), / 100
  24  hr_delta             hr_mean minus previous kept epoch, bpm / 10
  25  valid                1 for observed epochs, 0 for padding
====  =================  ==============================================
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.ndimage import median_filter

from udama.errors import ConfigError, ContractViolation

J_PER_MET = 71.0
EPOCH_MINUTES = 15
N_TIMESTEPS = 600
MIN_WEAR_HOURS = 72
NONWEAR_RUN_MINUTES = 90
EPOCH_MIN_WEAR = 0.5
MINUTES_PER_DAY = 1440

FEATURE_NAMES = (
    "hr_mean", "hr_max", "hr_min", "hr_std",
    "acc_mean", "acc_max", "acc_min", "acc_std",
    "met_mean", "met_max",
    "class_sedentary", "class_light", "class_mvpa", "class_vpa",
    "minute_sin", "minute_cos", "day_sin", "day_cos",
    "frac_sedentary", "frac_light", "frac_mvpa", "frac_vpa",
    "wear_fraction", "hr_per_met", "hr_delta", "valid",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_SCALES = np.array(
    [100.0] * 4 + [100.0] * 4 + [5.0] * 2 + [1.0] * 12 + [1.0, 100.0, 10.0, 1.0]
)
METADATA_NAMES = ("age", "sex", "height", "weight")
METADATA_SCALES = np.array([100.0, 1.0, 2.0, 100.0])
FEATURE_DECIMALS = 4


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Intensity(enum.IntEnum):
    SEDENTARY = 0
    LIGHT = 1
    MVPA = 2
    VPA = 3


class InsufficientWear(Exception):
    """Participant rejected: fewer than 72 hours of wear."""

    def __init__(self, wear_hours: float):
        super().__init__(f"InsufficientWear: {wear_hours:.1f} h worn, {MIN_WEAR_HOURS} h required")
        self.wear_hours = wear_hours


@dataclass
class SensorWindow:
    id: str
    X: np.ndarray
    metadata: np.ndarray
    y: float
    domain: Domain
    y_d: float = 0.0
    mask_len: int = N_TIMESTEPS

    @property
    def y_c(self) -> int:
        return 0 if self.domain is Domain.SOURCE else 1

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "domain": self.domain.value,
            "y": self.y,
            "y_c": self.y_c,
            "y_d": self.y_d,
            "metadata": self.metadata.tolist(),
            "X": self.X.tolist(),
            "mask_len": self.mask_len,
        })

    @classmethod
    def from_json(cls, line: str) -> "SensorWindow":
        d = json.loads(line)
        w = cls(
            id=d["id"],
            X=np.array(d["X"], dtype=np.float64),
            metadata=np.array(d["metadata"], dtype=np.float64),
            y=float(d["y"]),
            domain=Domain(d["domain"]),
            y_d=float(d["y_d"]),
            mask_len=int(d["mask_len"]),
        )
        if d["y_c"] != w.y_c:
            raise ContractViolation(f"{w.id}: y_c={d['y_c']} inconsistent with domain {w.domain.value}")
        if w.X.ndim != 2 or w.X.shape[1] != N_FEATURES:
            raise ContractViolation(f"{w.id}: X has shape {w.X.shape}, expected (T, {N_FEATURES})")
        return w


@dataclass
class Cohort:
    name: str
    domain: Domain
    windows: list[SensorWindow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([w.y for w in self.windows])

    def label_stats(self) -> dict[str, float]:
        y = self.labels
        return {"n": len(y), "mean": float(y.mean()), "std": float(y.std())}


@dataclass(frozen=True)
class ShiftSpec:
    n_source: int = 2000
    n_target: int = 200
    source_label_mean: float = 45.0
    source_label_std: float = 8.0
    target_label_mean: float = 33.0
    target_label_std: float = 7.0
    silver_noise_std: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("cohort sizes must be >= 1")
        if self.n_source < self.n_target:
            raise ConfigError("n_source must be >= n_target")
        if self.source_label_std <= 0 or self.target_label_std <= 0:
            raise ConfigError("label standard deviations must be > 0")
        if self.silver_noise_std < 0:
            raise ConfigError("silver_noise_std must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")


@dataclass
class RawStream:
    """Minute-level recording; ``start_minute`` counts from Monday 00:00."""

    start_minute: int
    heart_rate: np.ndarray
    intensity: np.ndarray
    wear: np.ndarray

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_minute + np.arange(len(self.heart_rate))

    def validate(self) -> None:
        n = len(self.heart_rate)
        if n == 0 or len(self.intensity) != n or len(self.wear) != n:
            raise ContractViolation("stream channels must be non-empty and equally long")
        if np.any(self.intensity < 0) or not np.all(np.isfinite(self.intensity)):
            raise ContractViolation("intensity must be finite and nonnegative")
        if not np.all(np.isfinite(self.heart_rate)):
            raise ContractViolation("heart rate must be finite")
        if self.start_minute < 0:
            raise ContractViolation("start_minute must be nonnegative")


# ----------------------------------------------------------------------
# small pure helpers


def cyclical_time_features(minute_of_day: int, day_of_week: int) -> np.ndarray:
    """(sin, cos) of the time of day and of the day of week."""
    if not 0 <= minute_of_day < MINUTES_PER_DAY:
        raise ContractViolation(f"minute_of_day {minute_of_day} outside [0, 1439]")
    if not 0 <= day_of_week < 7:
        raise ContractViolation(f"day_of_week {day_of_week} outside [0, 6]")
    a = 2.0 * math.pi * minute_of_day / MINUTES_PER_DAY
    b = 2.0 * math.pi * day_of_week / 7.0
    return np.array([math.sin(a), math.cos(a), math.sin(b), math.cos(b)])


def _intensity_class(mets: np.ndarray) -> np.ndarray:
    # [3, 6] inclusive on both ends is MVPA; (6, inf) VPA
    return np.select(
        [mets < 1.5, mets < 3.0, mets <= 6.0],
        [Intensity.SEDENTARY, Intensity.LIGHT, Intensity.MVPA],
        Intensity.VPA,
    )


def met_convert(intensity_j_min_kg: float) -> tuple[float, Intensity]:
    if intensity_j_min_kg < 0 or math.isnan(intensity_j_min_kg):
        raise ContractViolation(f"intensity must be >= 0, got {intensity_j_min_kg}")
    mets = intensity_j_min_kg / J_PER_MET
    return mets, Intensity(int(_intensity_class(np.array([mets]))[0]))


def default_hr_filter(hr: np.ndarray) -> np.ndarray:
    """Five-minute running median."""
    return median_filter(hr, size=5, mode="nearest")


def nonwear_mask(intensity: np.ndarray, min_run: int = NONWEAR_RUN_MINUTES) -> np.ndarray:
    """True for minutes inside a run of zero acceleration longer than ``min_run``."""
    zero = np.concatenate([[False], intensity == 0, [False]])
    edges = np.flatnonzero(np.diff(zero.astype(np.int8)))
    starts, stops = edges[0::2], edges[1::2]
    mask = np.zeros(len(intensity), dtype=bool)
    for lo, hi in zip(starts, stops):
        if hi - lo > min_run:
            mask[lo:hi] = True
    return mask


# ----------------------------------------------------------------------
# preprocessing


def epoch_features(
    raw: RawStream, hr_filter: Callable[[np.ndarray], np.ndarray] | None = default_hr_filter
) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch feature rows for every retained 15-minute epoch.

    Returns ``(features, epoch_start_minutes)`` with features of shape
    (n_kept, 26), already scaled. Raises :class:`InsufficientWear`.
    """
    raw.validate()
    hr = np.asarray(raw.heart_rate, dtype=np.float64)
    if hr_filter is not None:
        hr = hr_filter(hr)
    acc = np.asarray(raw.intensity, dtype=np.float64)
    worn = np.asarray(raw.wear, dtype=bool) & ~nonwear_mask(acc)
    wear_hours = worn.sum() / 60.0
    if wear_hours < MIN_WEAR_HOURS:
        raise InsufficientWear(wear_hours)

    n_epochs = len(hr) // EPOCH_MINUTES
    n = n_epochs * EPOCH_MINUTES
    hr_e = hr[:n].reshape(n_epochs, EPOCH_MINUTES)
    acc_e = acc[:n].reshape(n_epochs, EPOCH_MINUTES)
    worn_e = worn[:n].reshape(n_epochs, EPOCH_MINUTES)
    wear_frac = worn_e.mean(axis=1)
    keep = wear_frac >= EPOCH_MIN_WEAR
    hr_e, acc_e, worn_e, wear_frac = hr_e[keep], acc_e[keep], worn_e[keep], wear_frac[keep]
    starts = raw.start_minute + np.flatnonzero(keep) * EPOCH_MINUTES

    w = worn_e.astype(np.float64)
    cnt = w.sum(axis=1)

    def masked_stats(v):
        mean = (v * w).sum(axis=1) / cnt
        std = np.sqrt(((v - mean[:, None]) ** 2 * w).sum(axis=1) / cnt)
        vmax = np.where(worn_e, v, -np.inf).max(axis=1)
        vmin = np.where(worn_e, v, np.inf).min(axis=1)
        return mean, vmax, vmin, std

    hr_mean, hr_max, hr_min, hr_std = masked_stats(hr_e)
    acc_mean, acc_max, acc_min, acc_std = masked_stats(acc_e)
    met_mean, met_max = acc_mean / J_PER_MET, acc_max / J_PER_MET
    onehot = np.eye(4)[_intensity_class(met_mean)]
    minute_cls = _intensity_class(acc_e / J_PER_MET)
    fracs = np.stack([((minute_cls == c) & worn_e).sum(axis=1) / cnt for c in range(4)], axis=1)
    a = 2.0 * np.pi * (starts % MINUTES_PER_DAY) / MINUTES_PER_DAY
    b = 2.0 * np.pi * ((starts // MINUTES_PER_DAY) % 7) / 7.0
    cyc = np.stack([np.sin(a), np.cos(a), np.sin(b), np.cos(b)], axis=1)
    hr_per_met = hr_mean / np.maximum(met_mean, 1.0)
    hr_delta = np.diff(hr_mean, prepend=hr_mean[:1])

    feats = np.column_stack([
        hr_mean, hr_max, hr_min, hr_std,
        acc_mean, acc_max, acc_min, acc_std,
        met_mean, met_max, onehot, cyc, fracs,
        wear_frac, hr_per_met, hr_delta, np.ones(len(starts)),
    ])
    return np.round(feats / FEATURE_SCALES, FEATURE_DECIMALS), starts


def preprocess_stream(
    raw: RawStream,
    hr_filter: Callable[[np.ndarray], np.ndarray] | None = default_hr_filter,
    n_timesteps: int = N_TIMESTEPS,
) -> tuple[np.ndarray, int]:
    """Feature matrix of shape (n_timesteps, 26) and the number of real epochs.

    Records longer than ``n_timesteps`` epochs are truncated, shorter ones
    zero-padded at the end.
    """
    feats, _ = epoch_features(raw, hr_filter)
    mask_len = min(len(feats), n_timesteps)
    X = np.zeros((n_timesteps, N_FEATURES))
    X[:mask_len] = feats[:mask_len]
    return X, mask_len


# ----------------------------------------------------------------------
# simulation


def _participant_rng(seed: int, domain: Domain, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0 if domain is Domain.SOURCE else 1, index])


def simulate_stream(fitness: float, rng: np.random.Generator, days: float = 7.5) -> RawStream:
    """Minute-level heart rate and acceleration for one participant.

    Fitness enters through resting heart rate, heart-rate gain per MET and
    the propensity for moderate/vigorous bouts. Nights carry low but nonzero
    movement; occasional multi-hour device removals produce zero runs.
    """
    z = (fitness - 40.0) / 8.0
    rhr = 68.0 - 5.0 * z + rng.normal(0.0, 3.0)
    gain = max(12.0 - 2.5 * z + rng.normal(0.0, 1.0), 4.0)
    propensity = 0.6 * z + rng.normal(0.0, 0.6)

    n = int(days * MINUTES_PER_DAY) + int(rng.integers(0, MINUTES_PER_DAY // 2))
    start = int(rng.integers(0, 7 * MINUTES_PER_DAY))
    minute_of_day = (start + np.arange(n)) % MINUTES_PER_DAY
    wake = int(rng.integers(6 * 60, 8 * 60))
    sleep = int(rng.integers(22 * 60, 24 * 60))
    awake = (minute_of_day >= wake) & (minute_of_day < sleep)

    # awake behaviour in 5-minute bouts
    p = np.array([0.62, 0.30, 0.06 * math.exp(propensity), 0.012 * math.exp(propensity)])
    p /= p.sum()
    n_bouts = -(-n // 5)
    state = np.repeat(rng.choice(4, size=n_bouts, p=p), 5)[:n]
    lo = np.array([20.0, 110.0, 215.0, 430.0])[state]
    hi = np.array([100.0, 210.0, 420.0, 700.0])[state]
    intensity = rng.uniform(lo, hi)
    night = rng.exponential(3.0, size=n) * (rng.random(n) < 0.7)
    intensity = np.where(awake, intensity, night)

    mets = intensity / J_PER_MET
    hr = rhr + gain * np.maximum(mets - 1.0, 0.0) + rng.normal(0.0, 3.0, size=n)
    hr = np.where(awake, hr, rhr - 6.0 + rng.normal(0.0, 2.0, size=n))

    wear = np.ones(n, dtype=bool)
    for day in range(int(n // MINUTES_PER_DAY)):
        if rng.random() < 0.3:
            off_start = day * MINUTES_PER_DAY + int(rng.integers(0, MINUTES_PER_DAY - 300))
            off_len = int(rng.integers(120, 240))
            intensity[off_start:off_start + off_len] = 0.0
            hr[off_start:off_start + off_len] = 0.0
    return RawStream(start, hr, intensity, wear)


def _metadata(fitness: float, rng: np.random.Generator) -> np.ndarray:
    z = (fitness - 40.0) / 8.0
    sex = float(rng.random() < 1.0 / (1.0 + math.exp(-0.8 * z)))
    age = float(np.clip(48.0 - 4.0 * z + rng.normal(0.0, 8.0), 20.0, 80.0))
    height = 1.62 + 0.13 * sex + rng.normal(0.0, 0.06)
    bmi = float(np.clip(26.0 - 1.5 * z + rng.normal(0.0, 3.0), 17.0, 45.0))
    weight = bmi * height * height
    return np.round(np.array([age, sex, height, weight]) / METADATA_SCALES, FEATURE_DECIMALS)


def _draw_label(spec: ShiftSpec, domain: Domain, rng: np.random.Generator) -> tuple[float, float]:
    """Latent fitness and observed label; silver labels carry Gaussian noise."""
    if domain is Domain.SOURCE:
        mean, std = spec.source_label_mean, spec.source_label_std
    else:
        mean, std = spec.target_label_mean, spec.target_label_std
    fitness = max(float(rng.normal(mean, std)), 10.0)
    if domain is Domain.TARGET or spec.silver_noise_std == 0:
        return fitness, fitness
    return fitness, max(fitness + float(rng.normal(0.0, spec.silver_noise_std)), 5.0)


def _make_window(spec: ShiftSpec, domain: Domain, index: int) -> SensorWindow:
    rng = _participant_rng(spec.seed, domain, index)
    fitness, y = _draw_label(spec, domain, rng)
    meta = _metadata(fitness, rng)
    X, mask_len = preprocess_stream(simulate_stream(fitness, rng))
    prefix = "S" if domain is Domain.SOURCE else "T"
    return SensorWindow(f"{prefix}{index:05d}", X, meta, y, domain, mask_len=mask_len)


def generate_cohorts(spec: ShiftSpec) -> tuple[Cohort, Cohort]:
    """Source (silver labels) and target (gold labels) cohorts with fine labels set.

    Participant ``i`` of a domain draws from its own RNG keyed by
    ``(seed, domain, i)``, so output does not depend on generation order.
    """
    if not isinstance(spec, ShiftSpec):
        raise ConfigError("generate_cohorts needs a ShiftSpec")
    source = Cohort("source", Domain.SOURCE, [_make_window(spec, Domain.SOURCE, i) for i in range(spec.n_source)])
    target = Cohort("target", Domain.TARGET, [_make_window(spec, Domain.TARGET, i) for i in range(spec.n_target)])
    assign_fine_labels(source, target)
    return source, target


def draw_labels(spec: ShiftSpec, domain: Domain, n: int) -> np.ndarray:
    """The first ``n`` labels :func:`generate_cohorts` would produce, without streams."""
    return np.array([_draw_label(spec, domain, _participant_rng(spec.seed, domain, i))[1] for i in range(n)])


def assign_fine_labels(source: Cohort, target: Cohort) -> None:
    """Set ``y_d`` to each sample's z-score within the pooled label distribution."""
    labels = np.concatenate([source.labels, target.labels])
    if labels.size == 0:
        raise ConfigError("no labels to pool")
    mean, std = labels.mean(), labels.std()
    if not std > 0:
        raise ConfigError("pooled labels are constant; fine-grained labels undefined")
    for w in (*source.windows, *target.windows):
        w.y_d = float((w.y - mean) / std)


# ----------------------------------------------------------------------
# JSON-lines persistence


def write_jsonl(windows: Iterable[SensorWindow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            fh.write(w.to_json())
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[SensorWindow]:
    with open(path, encoding="utf-8") as fh:
        return [SensorWindow.from_json(line) for line in fh if line.strip()]


def read_cohort(path: str | Path, name: str | None = None) -> Cohort:
    windows = read_jsonl(path)
    if not windows:
        raise ContractViolation(f"{path}: empty dataset")
    domains = {w.domain for w in windows}
    domain = windows[0].domain if len(domains) == 1 else Domain.TARGET
    return Cohort(name or Path(path).stem, domain, windows)
