"""Multi-target trigger functions T(c, x): frequency injection plus four baselines."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import SegmentSet, TriggerBank, balanced_counts, poison_count
from .models import Adam, Classifier, ClassifierSpec, TrainConfig, TrainingDiverged, fit
from .signal import InjectionStrategy, Segment, inject_frequency, round_half_up, subset_size
from .models.training import PoisonFn, injection_poison_fn

ATTACKS = ("none", "professor_x", "patch_mt", "pulse_mt", "comp_mt", "adver_mt")

PATCH_CONSTANTS = {3: (-0.1, 0.0, 1.0), 4: (0.0, 1.0, 2.0, 3.0)}
PULSE_AMPLITUDES = (-0.8, -0.3, 0.3, 0.8)
COMPRESS_RATIOS = {3: (0.8, 0.6, 0.4), 4: (0.8, 0.6, 0.4, 0.2)}


def default_patch_constants(n_classes: int) -> tuple[float, ...]:
    return PATCH_CONSTANTS.get(n_classes, tuple(float(c) for c in range(n_classes)))


def default_pulse_amplitudes(n_classes: int) -> tuple[float, ...]:
    if n_classes <= len(PULSE_AMPLITUDES):
        return PULSE_AMPLITUDES[:n_classes]
    return tuple(np.linspace(-0.8, 0.8, n_classes))


def default_compress_ratios(n_classes: int) -> tuple[float, ...]:
    return COMPRESS_RATIOS.get(n_classes, tuple(np.linspace(0.8, 0.2, n_classes)))


# per-segment normalization over the whole E x T matrix, batched
def _normalize(X: np.ndarray):
    mean = X.mean(axis=(-2, -1), keepdims=True)
    std = X.std(axis=(-2, -1), keepdims=True)
    if np.any(std <= 0):
        raise ValueError("cannot z-normalize a constant segment")
    return (X - mean) / std, mean, std


def _batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


# Professor X ----------------------------------------------------------------

def professor_x(clean: Segment, bank: TriggerBank, strategies: Mapping[int, InjectionStrategy], c: int) -> Segment:
    return inject_frequency(clean, bank[c], strategies[c])


# PatchMT --------------------------------------------------------------------

def patch_region(E: int, T: int, beta: float, gamma: float) -> tuple[int, int]:
    return subset_size(gamma, E), subset_size(beta, T)


def patch_mt_array(X: np.ndarray, c: int, constants: Sequence[float], beta: float = 0.1, gamma: float = 0.5) -> np.ndarray:
    """Set the first round(gamma E) electrodes x first round(beta T) samples to constants[c] in z-units."""
    X, single = _batch(X)
    n_e, n_t = patch_region(X.shape[1], X.shape[2], beta, gamma)
    Z, mean, std = _normalize(X)
    out = X.copy()
    region = np.full((len(X), n_e, n_t), float(constants[c]))
    out[:, :n_e, :n_t] = region * std + mean
    return out[0] if single else out


def patch_mt(clean: Segment, c: int, constants: Sequence[float], beta: float = 0.1, gamma: float = 0.5) -> Segment:
    return clean.with_data(patch_mt_array(clean.data, c, constants, beta, gamma))


# PulseMT --------------------------------------------------------------------

def pulse_train(T: int, period: int, duty: float) -> np.ndarray:
    if period < 1:
        raise ValueError("pulse period must be >= 1 sample")
    if not 0.0 < duty <= 1.0:
        raise ValueError("duty cycle must lie in (0, 1]")
    width = max(1, round_half_up(duty * period))
    return (np.arange(T) % period < width).astype(np.float64)


def default_pulse_period(T: int) -> int:
    return max(1, round_half_up(T / 10))


def pulse_mt_array(X: np.ndarray, c: int, amplitudes: Sequence[float], period: int | None = None,
                   duty: float = 0.1, gamma: float = 0.5) -> np.ndarray:
    """Add a rectangular pulse train of amplitude amplitudes[c] (z-units) on the first round(gamma E) electrodes."""
    X, single = _batch(X)
    E, T = X.shape[1:]
    n_e = subset_size(gamma, E)
    train = pulse_train(T, period or default_pulse_period(T), duty)
    Z, mean, std = _normalize(X)
    Z = Z.copy()
    Z[:, :n_e, :] += float(amplitudes[c]) * train
    out = X.copy()
    # only the pulsed rows are rewritten, so untouched electrodes stay bitwise equal
    out[:, :n_e, :] = (Z * std + mean)[:, :n_e, :]
    return out[0] if single else out


def pulse_mt(clean: Segment, c: int, amplitudes: Sequence[float], period: int | None = None,
             duty: float = 0.1, gamma: float = 0.5) -> Segment:
    return clean.with_data(pulse_mt_array(clean.data, c, amplitudes, period, duty, gamma))


# CompMT ---------------------------------------------------------------------

def comp_mt_array(X: np.ndarray, c: int, ratios: Sequence[float]) -> np.ndarray:
    X, single = _batch(X)
    mean = X.mean(axis=(-2, -1), keepdims=True)
    out = float(ratios[c]) * (X - mean) + mean
    return out[0] if single else out


def comp_mt(clean: Segment, c: int, ratios: Sequence[float]) -> Segment:
    return clean.with_data(comp_mt_array(clean.data, c, ratios))


# AdverMT --------------------------------------------------------------------

def apply_spatial_filter(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.matmul(W, X)


def learn_spatial_filter(model: Classifier, X: np.ndarray, y: np.ndarray, alpha_mse: float = 1.0,
                         steps: int = 200, lr: float = 0.01) -> np.ndarray:
    """min_W mean[-CE(f(W x), y) + alpha * MSE(W x, x)], W initialised to the identity."""
    E = X.shape[1]
    W = np.eye(E)
    opt = Adam(E * E, lr=lr)
    flat = W.reshape(-1)
    n = len(X)
    for step in range(steps):
        WX = apply_spatial_filter(W, X)
        # input_gradient returns the per-sample CE gradient; negate for the -CE objective
        g_ce = -model.input_gradient(WX, y, "ce") / n
        resid = WX - X
        g = g_ce + alpha_mse * 2.0 * resid / (n * resid[0].size)
        grad = np.einsum("net,nft->ef", g, X, optimize=True)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"spatial filter diverged at step {step}")
        opt.step(flat, grad.reshape(-1))
    return W.copy()


def adver_mt(poison_source: SegmentSet, n_classes: int, local_spec: ClassifierSpec, train_config: TrainConfig,
             alpha_mse: float = 1.0, steps: int = 200, lr: float = 0.01) -> np.ndarray:
    """Per-class spatial filters (C, E, E) learned against a local model trained on the poison source only."""
    model = Classifier(local_spec)
    fit(model, poison_source.X, poison_source.y, train_config)
    filters = []
    for c in range(n_classes):
        sel = poison_source.y == c
        if not sel.any():
            raise ValueError(f"poison source has no segment of class {c}")
        filters.append(learn_spatial_filter(model, poison_source.X[sel], poison_source.y[sel], alpha_mse, steps, lr))
    return np.stack(filters)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


SPATIAL_MAGIC = b"SBKW"
SPATIAL_VERSION = 1


def save_spatial_filters(path, filters: np.ndarray, meta: dict | None = None) -> Path:
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
        raise ValueError(f"expected (C, E, E) filters, got {filters.shape}")
    if not np.all(np.isfinite(filters)):
        raise ValueError("spatial filters must be finite")
    head = json.dumps({"n_classes": filters.shape[0], "n_electrodes": filters.shape[1], **(meta or {})},
                      sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SPATIAL_MAGIC + struct.pack("<II", SPATIAL_VERSION, len(head)) + head)
        fh.write(filters.astype("<f4").tobytes(order="C"))
    return path


def load_spatial_filters(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SPATIAL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != SPATIAL_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    meta = json.loads(raw[12:12 + n].decode("utf-8"))
    C, E = meta["n_classes"], meta["n_electrodes"]
    return np.frombuffer(raw, dtype="<f4", count=C * E * E, offset=12 + n).reshape(C, E, E).astype(np.float64)


# configuration and dispatch ---------------------------------------------------

@dataclass
class AttackConfig:
    kind: str = "professor_x"
    beta: float = 0.1
    gamma: float = 0.5
    constants: list[float] | None = None
    amplitudes: list[float] | None = None
    pulse_period: int | None = None
    pulse_duty: float = 0.1
    ratios: list[float] | None = None
    alpha_mse: float = 1.0
    adver_steps: int = 200
    adver_lr: float = 0.01
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")

    def check(self, n_classes: int) -> None:
        for name in ("constants", "amplitudes", "ratios"):
            v = getattr(self, name)
            if v is not None and len(v) != n_classes:
                raise ValueError(f"{name} has {len(v)} entries for {n_classes} classes")


def trigger_fn(config: AttackConfig, n_classes: int, bank: TriggerBank | None = None,
               strategies: Mapping[int, InjectionStrategy] | None = None,
               spatial_filters: np.ndarray | None = None) -> PoisonFn:
    """Batched T(c, X) for the configured attack."""
    config.check(n_classes)
    kind = config.kind
    if kind == "none":
        return lambda X, c: np.array(X, dtype=np.float64, copy=True)
    if kind == "professor_x":
        if bank is None or strategies is None:
            raise ValueError("professor_x needs a trigger bank and strategies")
        return injection_poison_fn(bank, strategies)
    if kind == "patch_mt":
        consts = config.constants or default_patch_constants(n_classes)
        return lambda X, c: patch_mt_array(X, c, consts, config.beta, config.gamma)
    if kind == "pulse_mt":
        amps = config.amplitudes or default_pulse_amplitudes(n_classes)
        return lambda X, c: pulse_mt_array(X, c, amps, config.pulse_period, config.pulse_duty, config.gamma)
    if kind == "comp_mt":
        ratios = config.ratios or default_compress_ratios(n_classes)
        return lambda X, c: comp_mt_array(X, c, ratios)
    if spatial_filters is None:
        raise ValueError("adver_mt needs learned spatial filters")
    return lambda X, c: apply_spatial_filter(spatial_filters[c], np.asarray(X, dtype=np.float64))


def poison_with(poison_source: SegmentSet, poison_fn: PoisonFn, n_classes: int, rho: float, n_reference: int,
                seed: int = 0) -> SegmentSet:
    """Clean-label poison set for any trigger function; same sampling as ``build_poison_set``."""
    counts = balanced_counts(poison_count(rho, n_reference), n_classes)
    short = [f"class {c}: need {n}, have {int(np.sum(poison_source.y == c))}"
             for c, n in enumerate(counts) if n > np.sum(poison_source.y == c)]
    if short:
        raise ValueError("poison source too small (" + "; ".join(short) + ")")
    rng = np.random.default_rng(seed)
    parts = []
    for c, n in enumerate(counts):
        idx = np.flatnonzero(poison_source.y == c)
        chosen = np.sort(rng.choice(idx, size=n, replace=False)) if n else idx[:0]
        part = poison_source[chosen]
        if n:
            part = part.with_X(poison_fn(part.X, c))
        parts.append(part)
    return SegmentSet(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                      np.concatenate([p.subjects for p in parts]), poison_source.fs)
