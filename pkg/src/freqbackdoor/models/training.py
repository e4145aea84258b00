from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..data import SegmentSet, TriggerBank
from ..signal import InjectionStrategy, inject_array, make_mask
from .adam import Adam
from .classifier import Classifier

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_ca: list[float] = field(default_factory=list)


def fit(model: Classifier, X: np.ndarray, y: np.ndarray, config: TrainConfig,
        X_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
        param_mask: np.ndarray | None = None) -> TrainHistory:
    """Minibatch Adam on mean cross-entropy; mutates ``model`` in place.

    ``param_mask`` (0/1 over the flat parameters) freezes entries at zero
    gradient, which fine-pruning uses to keep pruned channels dead.
    """
    if len(X) == 0:
        raise ValueError("empty training set")
    opt = Adam(model.n_params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.shuffle_seed)
    history = TrainHistory()
    n = len(X)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad = model.loss_and_grad(X[idx], y[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            if param_mask is not None:
                grad = grad * param_mask
            opt.step(model.params, grad)
            total += loss * len(idx)
        history.loss.append(total / n)
        if X_val is not None:
            history.val_ca.append(accuracy(model, X_val, y_val))
    return history


def train(model: Classifier, train_set: SegmentSet, poison_set: SegmentSet | None, config: TrainConfig,
          validation: SegmentSet | None = None) -> tuple[Classifier, TrainHistory]:
    """Train on D_train plus the poison set; returns the last-epoch model and its history."""
    data = SegmentSet.concat([train_set, poison_set]) if poison_set is not None and len(poison_set) else train_set
    history = fit(model, data.X, data.y, config,
                  None if validation is None else validation.X, None if validation is None else validation.y)
    return model, history


def accuracy(model: Classifier, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(model.predict(X) == np.asarray(y)))


def evaluate_ca(model: Classifier, test: SegmentSet) -> float:
    return accuracy(model, test.X, test.y)


PoisonFn = Callable[[np.ndarray, int], np.ndarray]


def injection_poison_fn(bank: TriggerBank, strategies: Mapping[int, InjectionStrategy]) -> PoisonFn:
    triggers = bank.array()
    E, T = triggers.shape[1:]

    def poison(X: np.ndarray, c: int) -> np.ndarray:
        s = strategies[c]
        return inject_array(X, triggers[c], make_mask(s, E, T // 2 + 1), s.alpha)

    return poison


@dataclass
class ASRResult:
    overall: float
    per_class: dict[int, float]


def evaluate_asr_fn(model: Classifier, X: np.ndarray, poison_fn: PoisonFn, classes) -> ASRResult:
    """Multi-target ASR: every sample is triggered towards every class, the true one included."""
    per_class = {}
    for c in classes:
        per_class[int(c)] = float(np.mean(model.predict(poison_fn(X, int(c))) == c))
    return ASRResult(float(np.mean(list(per_class.values()))), per_class)


def evaluate_asr(model: Classifier, test: SegmentSet, bank: TriggerBank,
                 strategies: Mapping[int, InjectionStrategy]) -> ASRResult:
    missing = [c for c in range(len(bank)) if c not in strategies]
    if missing:
        raise ValueError(f"no strategy for classes {missing}")
    return evaluate_asr_fn(model, test.X, injection_poison_fn(bank, strategies), range(len(bank)))
