"""Backdoor defenses: Neural Cleanse, STRIP, spectral signatures and fine-pruning."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import mannwhitneyu

from .models import Adam, Classifier, TrainConfig, accuracy, fit, softmax
from .models.training import PoisonFn

log = logging.getLogger(__name__)

DEFENSES = ("neural_cleanse", "strip", "spectral_signature", "fine_prune")


@dataclass
class DefenseReport:
    kind: str
    per_class: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, (np.floating, float)):
                v = float(v)
                return v if math.isfinite(v) else str(v)
            if isinstance(v, np.integer):
                return int(v)
            return v

        return clean({"kind": self.kind, "per_class": self.per_class, "summary": self.summary,
                      "curves": self.curves, "histograms": self.histograms, "failures": self.failures})

    def save(self, directory, stem: str | None = None) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        paths = [directory / f"{stem}.json"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for name, hist in self.histograms.items():
            paths.append(write_histogram_csv(directory / f"{stem}_{name}_hist.csv", hist["edges"], hist["counts"]))
        for name, curve in self.curves.items():
            p = directory / f"{stem}_{name}.csv"
            keys = list(curve)
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(keys)
                for row in zip(*(curve[k] for k in keys)):
                    w.writerow([_fmt(v) for v in row])
            paths.append(p)
        return paths


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def histogram(values: np.ndarray, bins: int = 20, value_range: tuple[float, float] | None = None) -> dict:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=value_range)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def write_histogram_csv(path, edges, counts) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            w.writerow([_fmt(lo), _fmt(hi), int(n)])
    return path


# Neural Cleanse ---------------------------------------------------------------

def anomaly_indices(norms: Sequence[float]) -> np.ndarray:
    """|n - median| / (1.4826 MAD) per entry; a zero MAD maps deviations to inf (or 0 when none)."""
    n = np.asarray(norms, dtype=np.float64)
    med = np.median(n)
    dev = np.abs(n - med)
    mad = 1.4826 * np.median(dev)
    if mad == 0:
        return np.where(dev > 0, np.inf, 0.0)
    return dev / mad


@dataclass
class NeuralCleanseConfig:
    lam: float = 0.01
    steps: int = 500
    lr: float = 0.1
    batch_size: int = 64
    threshold: float = 2.0
    seed: int = 0


def reverse_trigger(model: Classifier, X: np.ndarray, target: int, config: NeuralCleanseConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Optimise a sigmoid mask and a range-bounded pattern that send ``X`` to ``target``.

    The pattern lives in [min(X), max(X)] so a tiny mask cannot smuggle in
    arbitrarily large values. Returns (mask, pattern, final CE).
    """
    E, T = X.shape[1:]
    lo, hi = float(X.min()), float(X.max())
    span = hi - lo if hi > lo else 1.0
    raw = np.zeros(E * T)
    raw_p = np.zeros(E * T)
    opt_m, opt_p = Adam(E * T, lr=config.lr), Adam(E * T, lr=config.lr)
    ce = float("nan")
    for step in range(config.steps):
        idx = rng.choice(len(X), size=min(config.batch_size, len(X)), replace=False)
        x = X[idx]
        m = _sigmoid(raw).reshape(E, T)
        sp = _sigmoid(raw_p).reshape(E, T)
        p = lo + span * sp
        blended = (1.0 - m) * x + m * p
        probs = softmax(model.logits(blended))
        ce = float(-np.mean(np.log(np.maximum(probs[:, target], 1e-300))))
        g = model.input_gradient(blended, target, "ce") / len(x)
        g_m = np.sum(g * (p - x), axis=0) + config.lam
        g_raw = g_m * m * (1.0 - m)
        g_raw_p = np.sum(g, axis=0) * m * span * sp * (1.0 - sp)
        if not (np.all(np.isfinite(g_raw)) and np.all(np.isfinite(g_raw_p)) and math.isfinite(ce)):
            raise FloatingPointError(f"trigger reversal for class {target} diverged at step {step}")
        opt_m.step(raw, g_raw.ravel())
        opt_p.step(raw_p, g_raw_p.ravel())
    mask = _sigmoid(raw).reshape(E, T)
    return mask, lo + span * _sigmoid(raw_p).reshape(E, T), ce


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def neural_cleanse(model: Classifier, X_clean: np.ndarray, config: NeuralCleanseConfig | None = None,
                   n_classes: int | None = None) -> DefenseReport:
    config = config or NeuralCleanseConfig()
    C = n_classes or model.spec.n_classes
    rng = np.random.default_rng(config.seed)
    report = DefenseReport("neural_cleanse")
    norms = {}
    for c in range(C):
        try:
            mask, _, ce = reverse_trigger(model, np.asarray(X_clean, dtype=np.float64), c, config, rng)
        except FloatingPointError as exc:
            log.warning("neural cleanse: %s", exc)
            report.failures[c] = str(exc)
            continue
        norms[c] = float(np.abs(mask).sum())
        report.per_class[c] = {"mask_l1": norms[c], "final_ce": ce}
    if len(norms) >= 2:
        classes = sorted(norms)
        idx = anomaly_indices([norms[c] for c in classes])
        for c, a in zip(classes, idx):
            report.per_class[c]["anomaly_index"] = float(a)
        flagged = min(classes, key=lambda c: (norms[c], c))
        a = report.per_class[flagged]["anomaly_index"]
        report.summary = {"anomaly_index": a, "flagged_class": flagged, "backdoor": bool(a > config.threshold),
                          "threshold": config.threshold}
    return report


# STRIP ------------------------------------------------------------------------

def _znorm_rows(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=(-2, -1), keepdims=True)
    sd = X.std(axis=(-2, -1), keepdims=True)
    return (X - mu) / np.where(sd > 0, sd, 1.0)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def strip_scores(model: Classifier, X: np.ndarray, overlays: np.ndarray, n_overlays: int = 100,
                 seed: int = 0, blend: str = "add") -> np.ndarray:
    """Mean prediction entropy of each input superposed with ``n_overlays`` clean overlays."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    overlays = np.asarray(overlays, dtype=np.float64)
    if n_overlays < 1:
        raise ValueError("n_overlays must be >= 1")
    if len(overlays) == 0:
        raise ValueError("empty overlay set")
    if blend not in ("add", "mean"):
        raise ValueError(f"unknown blend {blend!r}")
    rng = np.random.default_rng(seed)
    zx, zo = _znorm_rows(X), _znorm_rows(overlays)
    scores = np.empty(len(X))
    for i in range(len(X)):
        pick = rng.choice(len(zo), size=n_overlays, replace=n_overlays > len(zo))
        mixed = zx[i][None] + zo[pick]
        if blend == "mean":
            mixed = mixed / 2.0
        scores[i] = float(np.mean(entropy(model.predict_proba(mixed))))
    return scores


def detection_auc(clean_scores: np.ndarray, poison_scores: np.ndarray, low_is_positive: bool = True) -> float:
    """ROC AUC with poisoned samples as positives; ties count one half."""
    clean_scores, poison_scores = np.asarray(clean_scores), np.asarray(poison_scores)
    if not len(clean_scores) or not len(poison_scores):
        raise ValueError("need clean and poisoned scores")
    a, b = (-poison_scores, -clean_scores) if low_is_positive else (poison_scores, clean_scores)
    u = mannwhitneyu(a, b, alternative="two-sided").statistic
    return float(u / (len(a) * len(b)))


def strip_sweep(model: Classifier, X_clean: np.ndarray, X_poison: np.ndarray, overlays: np.ndarray,
                n_overlays: int = 100, seed: int = 0, bins: int = 20, blend: str = "add") -> DefenseReport:
    C = model.spec.n_classes
    clean = strip_scores(model, X_clean, overlays, n_overlays, seed, blend)
    poison = strip_scores(model, X_poison, overlays, n_overlays, seed + 1, blend)
    rng = (0.0, math.log(C))
    report = DefenseReport("strip")
    report.scores = {"clean": clean, "poisoned": poison}
    report.histograms = {"clean": histogram(clean, bins, rng), "poisoned": histogram(poison, bins, rng)}
    report.summary = {"auc": detection_auc(clean, poison), "clean_mean": float(clean.mean()),
                      "poisoned_mean": float(poison.mean()), "n_overlays": n_overlays}
    return report


# spectral signatures ----------------------------------------------------------

def top_singular_vector(M: np.ndarray, iterations: int = 100, tol: float = 1e-8, seed: int = 0) -> np.ndarray:
    """Leading right singular vector of ``M`` by power iteration on M^T M."""
    M = np.asarray(M, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = M.T @ (M @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return v
        w /= norm
        done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
        v = w
        if done:
            break
    return v


def spectral_scores(R: np.ndarray, groups: np.ndarray, iterations: int = 100, tol: float = 1e-8) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    scores = np.zeros(len(R))
    for g in np.unique(groups):
        sel = np.flatnonzero(groups == g)
        if len(sel) < 2:
            log.info("spectral signature: group %s has %d sample(s), skipped", g, len(sel))
            continue
        centred = R[sel] - R[sel].mean(axis=0)
        v = top_singular_vector(centred, iterations, tol, seed=int(g))
        scores[sel] = (centred @ v) ** 2
    return scores


def top_quantile_capture(scores: np.ndarray, groups: np.ndarray, is_poison: np.ndarray, factor: float = 1.5) -> float:
    """Share of true poisons among the top ``factor * eps`` scores of each group (eps = poison fraction)."""
    is_poison = np.asarray(is_poison, dtype=bool)
    if not is_poison.any():
        raise ValueError("no poisoned samples to capture")
    eps = is_poison.mean()
    caught = 0
    for g in np.unique(groups):
        sel = np.flatnonzero(groups == g)
        k = min(len(sel), int(math.ceil(factor * eps * len(sel))))
        top = sel[np.argsort(-scores[sel], kind="stable")[:k]]
        caught += int(is_poison[top].sum())
    return caught / int(is_poison.sum())


def spectral_signature_from_representations(R: np.ndarray, groups: np.ndarray, is_poison: np.ndarray,
                                            factor: float = 1.5, bins: int = 20) -> DefenseReport:
    scores = spectral_scores(R, groups)
    is_poison = np.asarray(is_poison, dtype=bool)
    report = DefenseReport("spectral_signature")
    report.scores = {"score": scores, "is_poison": is_poison.astype(int)}
    hi = float(scores.max()) if len(scores) and scores.max() > 0 else 1.0
    report.histograms = {"clean": histogram(scores[~is_poison], bins, (0.0, hi)),
                         "poisoned": histogram(scores[is_poison], bins, (0.0, hi))}
    report.summary = {"capture": top_quantile_capture(scores, groups, is_poison, factor) if is_poison.any() else None,
                      "auc": detection_auc(scores[~is_poison], scores[is_poison], low_is_positive=False)
                      if is_poison.any() and (~is_poison).any() else None,
                      "poison_fraction": float(is_poison.mean()), "factor": factor}
    return report


def spectral_signature(model: Classifier, X: np.ndarray, is_poison: np.ndarray, factor: float = 1.5) -> DefenseReport:
    R = model.representation(X)
    groups = model.predict(X)
    return spectral_signature_from_representations(R, groups, is_poison, factor)


# fine-pruning -----------------------------------------------------------------

DEFAULT_PRUNE_RATIOS = tuple(round(0.1 * i, 1) for i in range(10))


def channel_ranking(model: Classifier, X_calib: np.ndarray) -> np.ndarray:
    """Channel indices ordered from least to most active (mean |activation|)."""
    acts = model.feature_activations(X_calib)
    mean_abs = np.abs(acts).reshape(acts.shape[0], acts.shape[1], -1).mean(axis=(0, 2))
    return np.argsort(mean_abs, kind="stable")


def pruned_gate(n_channels: int, ranking: np.ndarray, ratio: float) -> np.ndarray:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1), got {ratio}")
    gate = np.ones(n_channels)
    gate[ranking[: int(math.floor(ratio * n_channels + 1e-12))]] = 0.0
    return gate


def fine_prune(model: Classifier, X_calib: np.ndarray, y_calib: np.ndarray, X_test: np.ndarray, y_test: np.ndarray,
               poison_fn: PoisonFn | None = None, classes: Sequence[int] | None = None,
               ratios: Sequence[float] = DEFAULT_PRUNE_RATIOS, finetune_epochs: int = 0,
               finetune_config: TrainConfig | None = None) -> DefenseReport:
    from .models import evaluate_asr_fn

    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"pruning ratio must lie in [0, 1), got {r}")
    ranking = channel_ranking(model, X_calib)
    n = len(ranking)
    classes = list(range(model.spec.n_classes)) if classes is None else list(classes)
    curve = {"ratio": [], "pruned": [], "ca": [], "asr": []}
    for r in sorted(ratios):
        pruned = model.copy()
        gate = pruned_gate(n, ranking, r)
        pruned.set_gate(gate)
        if finetune_epochs > 0:
            cfg = finetune_config or TrainConfig(epochs=finetune_epochs)
            cfg = TrainConfig(**{**cfg.to_dict(), "epochs": finetune_epochs})
            fit(pruned, X_calib, y_calib, cfg)
        curve["ratio"].append(float(r))
        curve["pruned"].append(int(n - gate.sum()))
        curve["ca"].append(accuracy(pruned, X_test, y_test))
        curve["asr"].append(evaluate_asr_fn(pruned, X_test, poison_fn, classes).overall if poison_fn else float("nan"))
    report = DefenseReport("fine_prune")
    report.curves = {"pruning": curve}
    report.summary = {"channels": n, "finetune_epochs": finetune_epochs}
    return report
