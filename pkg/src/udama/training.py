"""Two-stage training: supervised pre-training on the silver-standard source,
then adversarial adaptation on the gold-standard target with a few injected
source samples. Also the cross-validation protocol and the baseline runners.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from udama.datasynth import Cohort, Domain, SensorWindow
from udama.errors import ConfigError, ContractViolation
from udama.evaluation import MetricsReport, compute_metrics, hellinger_distance
from udama.losses import (
    LossWeights,
    combined_loss,
    cross_entropy_tape,
    gaussian_nll_tape,
    mse_tape,
)
from udama.model import (
    EncoderSpec,
    ModelParams,
    coarse_head,
    encode_batch,
    fine_head,
    gradient_reversal,
    init_params,
    predict_batch,
    predict_head,
    save_checkpoint,
)
from udama.numerics import Tape

log = logging.getLogger("udama.training")

# RNG stream tags; every random draw is keyed by (seed, tag, ...)
_INIT, _PRETRAIN, _ADAPT, _FOLD, _INJECT = 1, 2, 3, 4, 5


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


class Method(str, enum.Enum):
    SCRATCH = "Scratch"
    TF = "TF"
    TF_PLUS_SAMPLES = "TFPlusSamples"
    COARSE_ONLY = "CoarseOnly"
    FINE_ONLY = "FineOnly"
    UDAMA = "UDAMA"

    @classmethod
    def parse(cls, name: str) -> "Method":
        for m in cls:
            if m.value.lower() == str(name).lower():
                return m
        raise ConfigError(f"unknown method {name!r}; choose from {[m.value for m in cls]}")


@dataclass(frozen=True)
class GrlSchedule:
    """Gradient-reversal strength as a function of training progress in [0, 1].

    ``ramp`` is ``value * (2 / (1 + exp(-10 p)) - 1)``; ``constant`` is ``value``.
    """

    kind: str = "ramp"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ramp", "constant"):
            raise ConfigError(f"grl schedule kind must be 'ramp' or 'constant', got {self.kind!r}")
        if self.value < 0:
            raise ConfigError("grl strength must be >= 0")

    def __call__(self, progress: float) -> float:
        if self.kind == "constant":
            return self.value
        return self.value * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    pretrain_epochs: int = 50
    adapt_epochs: int = 100
    batch_size: int = 32
    injection_fraction: float = 0.05
    grl_schedule: GrlSchedule = field(default_factory=GrlSchedule)
    seed: int = 0
    folds: int = 3
    test_fraction: float = 0.30
    model: EncoderSpec = field(default_factory=EncoderSpec)
    patience: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.injection_fraction < 0:
            raise ConfigError("injection_fraction must be >= 0")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.trainable().items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _stack(windows: Sequence[SensorWindow]):
    X = np.stack([w.X for w in windows])
    meta = np.stack([np.asarray(w.metadata, dtype=np.float64) for w in windows])
    y = np.array([w.y for w in windows])
    y_c = np.array([w.y_c for w in windows])
    y_d = np.array([w.y_d for w in windows])
    return X, meta, y, y_c, y_d


def _check_finite(value: float, lr: float, stage: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"{stage}: non-finite loss {value} at epoch {epoch}, batch {batch} (lr={lr})"
        )


def _fit(
    params: ModelParams,
    windows: Sequence[SensorWindow],
    config: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    step_loss: Callable[[Tape, ModelParams, tuple, float], tuple],
    stage: str,
    history: list | None,
) -> ModelParams:
    """Shared mini-batch loop; ``step_loss`` builds the objective of one batch."""
    data = _stack(windows)
    n = len(windows)
    n_batches = -(-n // config.batch_size)
    total_steps = max(epochs * n_batches, 1)
    opt = Adam(config.lr)
    best, stale = math.inf, 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = tuple(a[idx] for a in data)
            progress = (epoch * n_batches + b) / total_steps
            params.zero_grad()
            tape = Tape()
            objective, record = step_loss(tape, params, batch, progress)
            _check_finite(objective.item(), config.lr, stage, epoch, b)
            tape.backward(objective)
            opt.step(params)
            epoch_loss += objective.item() * len(idx)
            if history is not None:
                history.append({"stage": stage, "epoch": epoch, "batch": b, **record})
        epoch_loss /= n
        log.info('{"event": "epoch", "stage": "%s", "epoch": %d, "loss": %.10g}', stage, epoch, epoch_loss)
        if config.patience is not None:
            if epoch_loss < best:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    params.zero_grad()
    return params


def _regression_step(alpha: float):
    def step(tape, params, batch, progress):
        X, meta, y, _, _ = batch
        pred = predict_head(tape, encode_batch(tape, params, X, meta), params)
        mse = mse_tape(tape, pred, y)
        return tape.scale(mse, alpha), {"mse": mse.item()}
    return step


def init_model(config: TrainConfig, labels: np.ndarray) -> ModelParams:
    """Fresh parameters with the output scale set from ``labels``."""
    params = init_params(config.model, _rng(config.seed, _INIT))
    params.set_label_scale(float(np.mean(labels)), float(np.std(labels)) or 1.0)
    return params


def pretrain(source: Cohort | Sequence[SensorWindow], config: TrainConfig, history: list | None = None) -> ModelParams:
    """Fully supervised MSE training on the (noisy) source labels."""
    windows = list(source.windows if isinstance(source, Cohort) else source)
    if not windows:
        raise ContractViolation("pretrain needs a non-empty source cohort")
    params = init_model(config, np.array([w.y for w in windows]))
    return _fit(params, windows, config, config.pretrain_epochs, _rng(config.seed, _PRETRAIN),
                _regression_step(1.0), "pretrain", history)


def finetune(params: ModelParams, train: Sequence[SensorWindow], config: TrainConfig,
             history: list | None = None) -> ModelParams:
    """Supervised fine-tuning of every parameter on ``alpha * mse``.

    Shares its RNG stream with :func:`adapt` so the two are comparable
    step for step.
    """
    if not train:
        raise ContractViolation("finetune needs training samples")
    return _fit(params.copy(), list(train), config, config.adapt_epochs, _rng(config.seed, _ADAPT),
                _regression_step(config.weights.alpha), "finetune", history)


def inject_source_samples(source: Cohort | Sequence[SensorWindow], target_train: Sequence[SensorWindow],
                          rho: float, seed: int) -> list[SensorWindow]:
    """Append ``round(rho * len(target_train))`` source samples drawn without replacement."""
    if rho < 0:
        raise ConfigError("injection fraction must be >= 0")
    pool = list(source.windows if isinstance(source, Cohort) else source)
    k = round_half_up(rho * len(target_train))
    if k > len(pool):
        raise ConfigError(f"cannot inject {k} samples from a source of {len(pool)}")
    if k == 0:
        return list(target_train)
    picks = _rng(seed, _INJECT, len(target_train)).choice(len(pool), size=k, replace=False)
    return list(target_train) + [pool[i] for i in sorted(picks)]


def adapt(pretrained: ModelParams, train: Sequence[SensorWindow], config: TrainConfig,
          weights: LossWeights | None = None, history: list | None = None) -> ModelParams:
    """Adversarial adaptation with both discriminators behind one reversal layer.

    The optimiser minimises ``alpha*mse + lambda1*cse + lambda2*gll``; the
    reversal flips the discriminator gradients reaching the encoder, which
    realises the signed objective that gets logged.
    """
    w = weights or config.weights
    train = list(train)
    if not train:
        raise ContractViolation("adapt needs training samples")
    if config.injection_fraction > 0 and len({s.domain for s in train}) < 2:
        log.warning("adapt: training set holds a single domain")
    schedule = config.grl_schedule

    def step(tape, params, batch, progress):
        X, meta, y, y_c, y_d = batch
        emb = encode_batch(tape, params, X, meta)
        mse = mse_tape(tape, predict_head(tape, emb, params), y)
        lam = schedule(progress)
        rev = gradient_reversal(tape, emb, lam)
        cse = cross_entropy_tape(tape, coarse_head(tape, rev, params), y_c)
        mu, s2 = fine_head(tape, rev, params)
        gll = gaussian_nll_tape(tape, mu, s2, y_d)
        objective = tape.add(
            tape.add(tape.scale(mse, w.alpha), tape.scale(cse, w.lambda1)),
            tape.scale(gll, w.lambda2),
        )
        parts = (mse.item(), cse.item(), gll.item())
        return objective, {
            "mse": parts[0], "cse": parts[1], "gll": parts[2], "lambda_grl": lam,
            "signed": combined_loss(*parts, w),
        }

    return _fit(pretrained.copy(), train, config, config.adapt_epochs, _rng(config.seed, _ADAPT),
                step, "adapt", history)


# ----------------------------------------------------------------------
# protocol


def fold_splits(target: Cohort | Sequence[SensorWindow], config: TrainConfig) -> list[FoldSplit]:
    """Independent seeded train/test resamples of the target ids, one per fold."""
    windows = list(target.windows if isinstance(target, Cohort) else target)
    ids = [w.id for w in windows]
    n_test = round_half_up(config.test_fraction * len(ids))
    if not 0 < n_test < len(ids):
        raise ConfigError(f"test_fraction={config.test_fraction} leaves an empty side for n={len(ids)}")
    splits = []
    for k in range(config.folds):
        order = _rng(config.seed, _FOLD, k).permutation(len(ids))
        test = tuple(sorted(ids[i] for i in order[:n_test]))
        train = tuple(sorted(ids[i] for i in order[n_test:]))
        splits.append(FoldSplit(k, train, test))
    return splits


def train_method(method: Method, source: Cohort, train: list[SensorWindow], config: TrainConfig,
                 pretrained: ModelParams | None = None, history: list | None = None) -> ModelParams:
    """Train one method on a target training split."""
    method = Method.parse(method) if not isinstance(method, Method) else method
    if method is Method.SCRATCH:
        params = init_model(config, np.array([w.y for w in train]))
        return finetune(params, train, config, history)
    if pretrained is None:
        pretrained = pretrain(source, config)
    if method is Method.TF:
        return finetune(pretrained, train, config, history)
    augmented = inject_source_samples(source, train, config.injection_fraction, config.seed)
    if method is Method.TF_PLUS_SAMPLES:
        return finetune(pretrained, augmented, config, history)
    alpha = config.weights.alpha
    weights = {
        Method.COARSE_ONLY: LossWeights(alpha, 1.0, 0.0),
        Method.FINE_ONLY: LossWeights(alpha, 0.0, 1.0),
        Method.UDAMA: config.weights,
    }[method]
    return adapt(pretrained, augmented, config, weights, history)


def crossvalidate(target: Cohort, source: Cohort, config: TrainConfig, method: Method | str,
                  pretrained: ModelParams | None = None, bins: int = 20,
                  checkpoint_dir: str | Path | None = None) -> tuple[MetricsReport, list[dict]]:
    """Evaluate ``method`` on held-out target-only test sets, one per fold.

    Returns the aggregated report and per-fold prediction records.
    """
    method = Method.parse(method) if not isinstance(method, Method) else method
    if len(target) < 10:
        raise ContractViolation(f"crossvalidate needs at least 10 target samples, got {len(target)}")
    if method is not Method.SCRATCH and pretrained is None:
        pretrained = pretrain(source, config)
    by_id = {w.id: w for w in target.windows}
    fold_metrics, records = [], []
    for split in fold_splits(target, config):
        train = [by_id[i] for i in split.train_ids]
        test = [by_id[i] for i in split.test_ids]
        if any(w.domain is not Domain.TARGET for w in test):
            raise ContractViolation("test folds must contain target samples only")
        params = train_method(method, source, train, config, pretrained)
        X, meta, y, _, _ = _stack(test)
        pred = predict_batch(params, X, meta)
        m = compute_metrics(pred, y)
        m["hellinger"] = hellinger_distance(pred, y, bins)
        m["fold"] = split.fold
        fold_metrics.append(m)
        records.append({"fold": split.fold, "ids": list(split.test_ids),
                        "pred": pred.tolist(), "truth": y.tolist()})
        log.info('{"event": "fold", "method": "%s", "fold": %d, "corr": %.6f, "mse": %.6f}',
                 method.value, split.fold, m["corr"], m["mse"])
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(params, Path(checkpoint_dir) / f"{method.value}_fold{split.fold}.json")
    return MetricsReport.from_folds(method.value, fold_metrics), records


def run_baseline(kind: Method | str, source: Cohort, target: Cohort, config: TrainConfig,
                 pretrained: ModelParams | None = None, bins: int = 20) -> MetricsReport:
    report, _ = crossvalidate(target, source, config, Method.parse(kind) if isinstance(kind, str) else kind,
                              pretrained, bins)
    return report

