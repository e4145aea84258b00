"""Per-class injection-strategy search: REINFORCE policy, random search and a genetic algorithm."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import DatasetSplits, SegmentSet, TriggerBank, balanced_counts, poison_class, poison_count
from .models import Adam, Classifier, ClassifierSpec, TrainConfig, TrainingDiverged, accuracy, fit
from .models.layers import ELU, ChannelStandardize, Dense, GlobalAvgPool, RowAvgPool, RowConv
from .signal import InjectionStrategy, bin_frequencies, inject_array, make_mask, subset_size

log = logging.getLogger(__name__)

ALGORITHMS = ("policy_gradient", "random", "genetic")


# reward ---------------------------------------------------------------------

@dataclass(frozen=True)
class RewardBreakdown:
    ca: float
    asr: float
    dis_term: float
    hf_term: float
    lam: float = 2.0
    mu: float = 0.3
    nu: float = 0.005

    @property
    def total(self) -> float:
        return self.ca + self.lam * self.asr + self.mu * self.dis_term + self.nu * self.hf_term

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def dis_term(freq_bins, n_bins: int) -> float:
    """Smallest pairwise distance between selected bins; a singleton counts as n_bins."""
    b = np.sort(np.asarray(freq_bins, dtype=int))
    if len(b) < 2:
        return float(n_bins)
    return float(np.min(np.diff(b)))


def reward(ca: float, asr: float, strategy: InjectionStrategy, n_bins: int,
           lam: float = 2.0, mu: float = 0.3, nu: float = 0.005) -> RewardBreakdown:
    return RewardBreakdown(float(ca), float(asr), dis_term(strategy.freq_bins, n_bins),
                           float(min(strategy.freq_bins)), lam, mu, nu)


# policy network -------------------------------------------------------------

class PolicyNet:
    """Conv(1x3) -> standardize -> ELU -> pool, twice, then global pool, a dense
    layer and two linear heads producing electrode and frequency logits."""

    def __init__(self, n_electrodes: int, length: int, seed: int = 0, channels=(32, 64), hidden: int = 256):
        self.E, self.T = n_electrodes, length
        self.F = length // 2 + 1
        c1, c2 = channels
        self.body = [
            RowConv(1, c1, 3), ChannelStandardize(), ELU(), RowAvgPool(2),
            RowConv(c1, c2, 3), ChannelStandardize(), ELU(), RowAvgPool(2),
            GlobalAvgPool(), Dense(c2, hidden), ELU(),
        ]
        self.heads = [Dense(hidden, self.E), Dense(hidden, self.F)]
        self._layers = self.body + self.heads
        shapes = [s for layer in self._layers for s in layer.param_shapes()]
        self._shapes = shapes
        self._sizes = [int(np.prod(s)) for s in shapes]
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)]).astype(int)
        self._counts = [len(layer.param_shapes()) for layer in self._layers]
        rng = np.random.default_rng(seed)
        body = [p.ravel() for layer in self.body for p in layer.init_params(rng)]
        # zero heads: the first strategies are drawn uniformly
        self.params = np.concatenate(body + [np.zeros(sum(self._sizes[-4:]))])

    @property
    def n_params(self) -> int:
        return int(self._offsets[-1])

    def _views(self):
        out, i = [], 0
        for n in self._counts:
            out.append([self.params[self._offsets[j]:self._offsets[j + 1]].reshape(self._shapes[j]) for j in range(i, i + n)])
            i += n
        return out

    def _input(self, trigger: np.ndarray) -> np.ndarray:
        x = np.asarray(trigger, dtype=np.float64)
        if x.shape != (self.E, self.T):
            raise ValueError(f"trigger shape {x.shape} does not match policy input {(self.E, self.T)}")
        std = x.std()
        x = (x - x.mean()) / std if std > 0 else x - x.mean()
        return x[None, None]

    def forward(self, trigger: np.ndarray):
        views = self._views()
        h = self._input(trigger)
        caches = []
        for layer, p in zip(self.body, views):
            h, c = layer.forward(p, h)
            caches.append(c)
        n = len(self.body)
        v1, c1 = self.heads[0].forward(views[n], h)
        v2, c2 = self.heads[1].forward(views[n + 1], h)
        return v1[0], v2[0], (caches + [c1, c2], views)

    def logits(self, trigger: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v1, v2, _ = self.forward(trigger)
        return v1, v2

    def backward(self, cache, d_v1: np.ndarray, d_v2: np.ndarray) -> np.ndarray:
        caches, views = cache
        n = len(self.body)
        grads = [None] * len(self._layers)
        dh1, grads[n] = self.heads[0].backward(views[n], caches[n], d_v1[None])
        dh2, grads[n + 1] = self.heads[1].backward(views[n + 1], caches[n + 1], d_v2[None])
        dh = dh1 + dh2
        for i in range(n - 1, -1, -1):
            dh, grads[i] = self.body[i].backward(views[i], caches[i], dh)
        return np.concatenate([g.ravel() for layer_grads in grads for g in layer_grads])


# sampling -------------------------------------------------------------------

def _log_softmax(v: np.ndarray) -> np.ndarray:
    finite = np.isfinite(v)
    m = v[finite].max()
    out = np.full_like(v, -np.inf, dtype=np.float64)
    out[finite] = v[finite] - m - np.log(np.sum(np.exp(v[finite] - m)))
    return out


def _top_k(v: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -v: ties go to the lower index
    return np.sort(np.argsort(-v, kind="stable")[:k])


def mask_dc(v2: np.ndarray) -> np.ndarray:
    v2 = np.array(v2, dtype=np.float64)
    v2[0] = -np.inf
    return v2


@dataclass
class SampledStrategy:
    strategy: InjectionStrategy
    log_prob: float
    d_v1: np.ndarray
    d_v2: np.ndarray


def sample_subset(v: np.ndarray, k: int, rng: np.random.Generator | None, greedy: bool = False):
    """Gumbel-top-k over finite logits. Returns (indices, sum of log-softmax, gradient wrt v)."""
    v = np.asarray(v, dtype=np.float64)
    n_valid = int(np.isfinite(v).sum())
    if k < 1:
        raise ValueError("subset size must be >= 1")
    if k > n_valid:
        raise ValueError(f"cannot select {k} items from {n_valid} candidates")
    scores = v if greedy else v + rng.gumbel(size=v.shape)
    idx = _top_k(np.where(np.isfinite(v), scores, -np.inf), k)
    lsm = _log_softmax(v)
    p = np.where(np.isfinite(lsm), np.exp(lsm), 0.0)
    grad = -k * p
    grad[idx] += 1.0
    return idx, float(lsm[idx].sum()), grad


def sample_strategy(v1: np.ndarray, v2: np.ndarray, gamma: float, beta: float, rng: np.random.Generator | None,
                    target_class: int = 0, alpha: float = 0.8, greedy: bool = False) -> SampledStrategy:
    E, F = len(v1), len(v2)
    kE, kF = subset_size(gamma, E), subset_size(beta, F)
    if kE < 1 or kF < 1:
        raise ValueError(f"ratios give empty selections (|M_e|={kE}, |M_f|={kF})")
    el, lp1, g1 = sample_subset(v1, kE, rng, greedy)
    fb, lp2, g2 = sample_subset(mask_dc(v2), kF, rng, greedy)
    return SampledStrategy(InjectionStrategy(target_class, tuple(el), tuple(fb), alpha), lp1 + lp2, g1, g2)


def random_strategy(E: int, F: int, gamma: float, beta: float, rng: np.random.Generator,
                    target_class: int = 0, alpha: float = 0.8) -> InjectionStrategy:
    el = rng.choice(E, size=subset_size(gamma, E), replace=False)
    fb = 1 + rng.choice(F - 1, size=subset_size(beta, F), replace=False)
    return InjectionStrategy(target_class, tuple(np.sort(el)), tuple(np.sort(fb)), alpha)


# configuration --------------------------------------------------------------

def _default_surrogate_train() -> TrainConfig:
    return TrainConfig(lr=5e-3, epochs=6)


@dataclass
class GeneticConfig:
    population: int = 10
    crossover_rate: float = 0.8
    mutation_rate: float = 0.3

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("genetic search needs a population of at least 2")


@dataclass
class OptimizerConfig:
    lam: float = 2.0
    mu: float = 0.3
    nu: float = 0.005
    iterations: int = 250
    policy_lr: float = 0.01
    gamma: float = 0.5
    beta: float = 0.1
    alpha: float = 0.8
    rho: float = 0.4
    poison_reference: str = "poison_source"
    algorithm: str = "policy_gradient"
    baseline: str = "none"
    baseline_decay: float = 0.9
    evaluate_on: str = "validation"
    surrogate: dict | None = None
    surrogate_train: TrainConfig = field(default_factory=_default_surrogate_train)
    genetic: GeneticConfig = field(default_factory=GeneticConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.surrogate_train, Mapping):
            self.surrogate_train = TrainConfig(**self.surrogate_train)
        if isinstance(self.genetic, Mapping):
            self.genetic = GeneticConfig(**self.genetic)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("gamma", "beta"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown search algorithm {self.algorithm!r}")
        if self.baseline not in ("none", "moving_average"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.evaluate_on not in ("validation", "test"):
            raise ValueError("evaluate_on must be 'validation' or 'test'")
        if self.poison_reference not in ("poison_source", "train"):
            raise ValueError("poison_reference must be 'poison_source' or 'train'")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerConfig":
        return cls(**dict(d))


def poison_reference_count(splits: DatasetSplits, config: OptimizerConfig) -> int:
    return len(splits.poison_source) if config.poison_reference == "poison_source" else len(splits.train)


# evaluation -----------------------------------------------------------------

class StrategyEvaluator:
    """Scores a candidate strategy for one class by poisoning, training a surrogate and measuring CA/ASR."""

    def __init__(self, splits: DatasetSplits, bank: TriggerBank, target_class: int, config: OptimizerConfig,
                 surrogate_spec: ClassifierSpec):
        self.splits, self.bank, self.c, self.config = splits, bank, int(target_class), config
        self.spec = surrogate_spec
        E, T = splits.train.shape
        self.E, self.T, self.F = E, T, T // 2 + 1
        self.eval_set = splits.validation if config.evaluate_on == "validation" else splits.test
        total = poison_count(config.rho, poison_reference_count(splits, config))
        self.count = balanced_counts(total, len(bank))[self.c]
        have = int(np.sum(splits.poison_source.y == self.c))
        if self.count > have:
            raise ValueError(f"class {self.c}: need {self.count} poisoned segments, poison source holds {have}")
        self.trigger = bank[self.c]
        self.n_evaluations = 0

    def poison(self, strategy: InjectionStrategy, index: int) -> SegmentSet:
        rng = np.random.default_rng([self.config.seed, self.c, index, 1])
        return poison_class(self.splits.poison_source, self.trigger, strategy, self.count, rng)

    def __call__(self, strategy: InjectionStrategy, index: int) -> RewardBreakdown:
        self.n_evaluations += 1
        P = self.poison(strategy, index)
        X = np.concatenate([self.splits.train.X, P.X]) if len(P) else self.splits.train.X
        y = np.concatenate([self.splits.train.y, P.y]) if len(P) else self.splits.train.y
        model = Classifier(replace(self.spec, seed=int(np.random.SeedSequence([self.config.seed, self.c, index]).generate_state(1)[0])))
        fit(model, X, y, replace(self.config.surrogate_train, shuffle_seed=self.config.seed * 100003 + index))
        ev = self.eval_set
        ca = accuracy(model, ev.X, ev.y)
        triggered = inject_array(ev.X, self.trigger.data, make_mask(strategy, self.E, self.F), strategy.alpha)
        asr = float(np.mean(model.predict(triggered) == self.c))
        c = self.config
        return reward(ca, asr, strategy, self.F, c.lam, c.mu, c.nu)


Evaluator = Callable[[InjectionStrategy, int], RewardBreakdown]


@dataclass
class TraceEntry:
    iteration: int
    strategy: InjectionStrategy | None
    breakdown: RewardBreakdown | None
    best_total: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "strategy": None if self.strategy is None else self.strategy.to_dict(),
            "reward": None if self.breakdown is None else self.breakdown.to_dict(),
            "best_total": self.best_total,
            "error": self.error,
        }


@dataclass
class ClassResult:
    target_class: int
    strategy: InjectionStrategy | None
    breakdown: RewardBreakdown | None
    trace: list[TraceEntry]
    algorithm: str
    wall_time: float = 0.0

    @property
    def rewards(self) -> np.ndarray:
        return np.array([np.nan if t.breakdown is None else t.breakdown.total for t in self.trace])

    @property
    def best_trace(self) -> np.ndarray:
        return np.array([t.best_total for t in self.trace])

    @property
    def best_total(self) -> float:
        return -math.inf if self.breakdown is None else self.breakdown.total


class _Tracker:
    def __init__(self, target_class: int, algorithm: str):
        self.c, self.algorithm = target_class, algorithm
        self.best: tuple[InjectionStrategy, RewardBreakdown] | None = None
        self.trace: list[TraceEntry] = []

    def evaluate(self, evaluate: Evaluator, strategy: InjectionStrategy) -> RewardBreakdown | None:
        i = len(self.trace)
        try:
            b = evaluate(strategy, i)
            if not np.isfinite(b.total):
                raise TrainingDiverged(f"non-finite reward {b.total}")
        except (TrainingDiverged, FloatingPointError) as exc:
            log.warning("class %d iteration %d skipped: %s", self.c, i, exc)
            self.trace.append(TraceEntry(i, strategy, None, self._best_total(), str(exc)))
            return None
        if self.best is None or b.total > self.best[1].total:
            self.best = (strategy, b)
        self.trace.append(TraceEntry(i, strategy, b, self._best_total()))
        return b

    def _best_total(self) -> float:
        return -math.inf if self.best is None else self.best[1].total

    def result(self, t0: float) -> ClassResult:
        s, b = self.best if self.best is not None else (None, None)
        return ClassResult(self.c, s, b, self.trace, self.algorithm, time.perf_counter() - t0)


# search algorithms ----------------------------------------------------------

def policy_gradient_search(trigger: np.ndarray, evaluate: Evaluator, config: OptimizerConfig, target_class: int,
                           budget: int | None = None) -> ClassResult:
    """REINFORCE over Gumbel-top-k subsets: theta <- theta + lr * (R - b) * grad log pi."""
    t0 = time.perf_counter()
    E, T = trigger.shape
    policy = PolicyNet(E, T, seed=int(np.random.SeedSequence([config.seed, target_class, 7]).generate_state(1)[0]))
    opt = Adam(policy.n_params, lr=config.policy_lr)
    rng = np.random.default_rng([config.seed, target_class, 11])
    tracker = _Tracker(target_class, "policy_gradient")
    baseline = None
    for _ in range(budget or config.iterations):
        v1, v2, cache = policy.forward(trigger)
        s = sample_strategy(v1, v2, config.gamma, config.beta, rng, target_class, config.alpha)
        b = tracker.evaluate(evaluate, s.strategy)
        if b is None:
            continue
        R = b.total
        if config.baseline == "none":
            advantage = R
        else:
            # the first reward seeds the baseline, so the first update is neutral
            baseline = R if baseline is None else baseline
            advantage = R - baseline
            baseline = config.baseline_decay * baseline + (1 - config.baseline_decay) * R
        grad = policy.backward(cache, s.d_v1, s.d_v2)
        opt.step(policy.params, -advantage * grad)
    return tracker.result(t0)


def random_search(E: int, F: int, evaluate: Evaluator, config: OptimizerConfig, target_class: int,
                  budget: int | None = None) -> ClassResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([config.seed, target_class, 13])
    tracker = _Tracker(target_class, "random")
    for _ in range(budget or config.iterations):
        tracker.evaluate(evaluate, random_strategy(E, F, config.gamma, config.beta, rng, target_class, config.alpha))
    return tracker.result(t0)


def _crossover(a: tuple[int, ...], b: tuple[int, ...], rng) -> tuple[int, ...]:
    union = np.union1d(a, b)
    return tuple(np.sort(rng.choice(union, size=len(a), replace=False)))


def _mutate(members: tuple[int, ...], candidates: np.ndarray, rng) -> tuple[int, ...]:
    outside = np.setdiff1d(candidates, members)
    if not len(outside):
        return members
    out = list(members)
    out[rng.integers(len(out))] = int(rng.choice(outside))
    return tuple(sorted(out))


def genetic_search(E: int, F: int, evaluate: Evaluator, config: OptimizerConfig, target_class: int,
                   budget: int | None = None) -> ClassResult:
    """Fixed-cardinality GA: size-2 tournaments, union-sample crossover, swap mutation, elitism of one.

    Stops once ``budget`` strategies have been evaluated; the elite is carried
    over without re-evaluation.
    """
    ga = config.genetic
    if ga.population < 2:
        raise ValueError("genetic search needs a population of at least 2")
    t0 = time.perf_counter()
    budget = budget or config.iterations
    rng = np.random.default_rng([config.seed, target_class, 17])
    tracker = _Tracker(target_class, "genetic")
    electrodes, bins = np.arange(E), np.arange(1, F)

    def fitness(s):
        b = tracker.evaluate(evaluate, s)
        return -math.inf if b is None else b.total

    pop = []
    for _ in range(min(ga.population, budget)):
        s = random_strategy(E, F, config.gamma, config.beta, rng, target_class, config.alpha)
        pop.append((s, fitness(s)))
    while len(tracker.trace) < budget:
        pop.sort(key=lambda p: -p[1])
        nxt = [pop[0]]
        while len(nxt) < ga.population and len(tracker.trace) < budget:
            parents = []
            for _ in range(2):
                i, j = rng.choice(len(pop), size=2, replace=False)
                parents.append(pop[i][0] if pop[i][1] >= pop[j][1] else pop[j][0])
            a, b = parents
            if rng.random() < ga.crossover_rate:
                el, fb = _crossover(a.electrodes, b.electrodes, rng), _crossover(a.freq_bins, b.freq_bins, rng)
            else:
                el, fb = a.electrodes, a.freq_bins
            if rng.random() < ga.mutation_rate:
                el = _mutate(el, electrodes, rng)
            if rng.random() < ga.mutation_rate:
                fb = _mutate(fb, bins, rng)
            child = InjectionStrategy(target_class, el, fb, config.alpha)
            nxt.append((child, fitness(child)))
        pop = nxt
    return tracker.result(t0)


# driver ---------------------------------------------------------------------

def default_surrogate_spec(E: int, T: int, n_classes: int) -> ClassifierSpec:
    return ClassifierSpec("cnn1d", (E, T), n_classes, spatial_filters=4, channels=(4, 8), kernels=(32, 8))


def surrogate_spec_for(splits: DatasetSplits, n_classes: int, config: OptimizerConfig) -> ClassifierSpec:
    E, T = splits.train.shape
    if config.surrogate:
        return ClassifierSpec(**{"input_shape": (E, T), "n_classes": n_classes, **config.surrogate})
    return default_surrogate_spec(E, T, n_classes)


def optimize_class(splits: DatasetSplits, bank: TriggerBank, target_class: int, config: OptimizerConfig,
                   algorithm: str | None = None, budget: int | None = None,
                   evaluator: Evaluator | None = None) -> ClassResult:
    algorithm = algorithm or config.algorithm
    E, T = splits.train.shape
    if evaluator is None:
        evaluator = StrategyEvaluator(splits, bank, target_class, config, surrogate_spec_for(splits, len(bank), config))
    if algorithm == "policy_gradient":
        return policy_gradient_search(bank[target_class].data, evaluator, config, target_class, budget)
    if algorithm == "random":
        return random_search(E, T // 2 + 1, evaluator, config, target_class, budget)
    if algorithm == "genetic":
        return genetic_search(E, T // 2 + 1, evaluator, config, target_class, budget)
    raise ValueError(f"unknown search algorithm {algorithm!r}")


def optimize_strategies(splits: DatasetSplits, bank: TriggerBank, config: OptimizerConfig,
                        algorithm: str | None = None, budget: int | None = None,
                        classes=None, jobs: int = 1) -> dict[int, ClassResult]:
    """Independent per-class search; returns the best strategy, its reward and the trace per class."""
    classes = list(range(len(bank))) if classes is None else [int(c) for c in classes]
    if jobs > 1 and len(classes) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(classes))) as pool:
            futures = {c: pool.submit(optimize_class, splits, bank, c, config, algorithm, budget) for c in classes}
            return {c: f.result() for c, f in futures.items()}
    return {c: optimize_class(splits, bank, c, config, algorithm, budget) for c in classes}


def best_strategies(results: Mapping[int, ClassResult]) -> dict[int, InjectionStrategy]:
    missing = [c for c, r in results.items() if r.strategy is None]
    if missing:
        raise RuntimeError(f"no successful evaluation for classes {missing}")
    return {c: r.strategy for c, r in results.items()}


# strategy files -------------------------------------------------------------

STRATEGY_FORMAT_VERSION = 1


def save_strategies(path, strategies: Mapping[int, InjectionStrategy], length: int, fs: float,
                    results: Mapping[int, ClassResult] | None = None, metadata: dict | None = None) -> Path:
    freqs = bin_frequencies(length, fs)
    classes = []
    for c in sorted(strategies):
        s = strategies[c]
        entry = {**s.to_dict(), "freq_hz": [float(freqs[k]) for k in s.freq_bins]}
        if results and c in results and results[c].breakdown is not None:
            entry["reward"] = results[c].breakdown.to_dict()
            entry["algorithm"] = results[c].algorithm
            entry["evaluations"] = len(results[c].trace)
        classes.append(entry)
    doc = {"format_version": STRATEGY_FORMAT_VERSION, "length": length, "fs": fs,
           "metadata": metadata or {}, "classes": classes}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_strategies(path) -> dict[int, InjectionStrategy]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != STRATEGY_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported strategy format version {doc.get('format_version')}")
    out = {}
    for entry in doc["classes"]:
        s = InjectionStrategy.from_dict(entry)
        out[s.target_class] = s
    return out
