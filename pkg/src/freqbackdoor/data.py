"""Synthetic multichannel datasets, LOSO splits, trigger banks and clean-label poison sets."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .signal import (
    InjectionStrategy,
    Segment,
    bin_frequencies,
    inject_array,
    make_mask,
    round_half_up,
)

FORMAT_VERSION = 1
SUBJECT_MAGIC = b"SBKD"


@dataclass
class ClassProfile:
    band: tuple[float, float]
    electrodes: tuple[int, ...]
    boost: float

    def to_dict(self):
        return {"band": list(self.band), "electrodes": list(self.electrodes), "boost": self.boost}


def _default_profiles() -> list[ClassProfile]:
    # a shared 10 Hz rhythm; the electrode carrying it encodes the class
    return [ClassProfile((10.0, 10.0), (c,), 16.0) for c in range(3)]


@dataclass
class DatasetManifest:
    n_subjects: int = 10
    n_classes: int = 3
    n_electrodes: int = 8
    length: int = 128
    fs: float = 128.0
    segments_per_subject_per_class: int = 60
    seed: int = 0
    class_profiles: list[ClassProfile] = field(default_factory=_default_profiles)
    amplitude_scale_range: tuple[float, float] = (0.7, 1.4)
    noise_exponent_range: tuple[float, float] = (1.0, 1.6)
    white_noise_std: float = 0.3
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.class_profiles = [p if isinstance(p, ClassProfile) else ClassProfile(tuple(p["band"]), tuple(p["electrodes"]), float(p["boost"]))
                               for p in self.class_profiles]
        self.amplitude_scale_range = tuple(self.amplitude_scale_range)
        self.noise_exponent_range = tuple(self.noise_exponent_range)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.class_profiles) != self.n_classes:
            raise ValueError(f"{len(self.class_profiles)} class profiles for {self.n_classes} classes")
        if self.length < 2 or self.length % 2:
            raise ValueError("segment length must be even and >= 2")
        if self.n_subjects < 1 or self.segments_per_subject_per_class < 1:
            raise ValueError("need at least one subject and one segment per class")
        nyquist = self.fs / 2
        for c, p in enumerate(self.class_profiles):
            lo, hi = p.band
            if not 0 < lo <= hi < nyquist:
                raise ValueError(f"class {c} band {p.band} outside (0, {nyquist}) Hz")
            if not p.electrodes or min(p.electrodes) < 0 or max(p.electrodes) >= self.n_electrodes:
                raise ValueError(f"class {c} electrode subset {p.electrodes} invalid for E={self.n_electrodes}")
            if p.boost < 1:
                raise ValueError(f"class {c} boost must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_profiles"] = [p.to_dict() for p in self.class_profiles]
        d["amplitude_scale_range"] = list(self.amplitude_scale_range)
        d["noise_exponent_range"] = list(self.noise_exponent_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        return cls(**dict(d))


class SegmentSet:
    """Array-backed collection of segments sharing (E, T, fs)."""

    def __init__(self, X: np.ndarray, y: np.ndarray, subjects: np.ndarray, fs: float):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected (N, E, T) array, got {X.shape}")
        self.X = X
        self.y = np.asarray(y, dtype=int)
        self.subjects = np.asarray(subjects, dtype=int)
        self.fs = float(fs)
        if not len(self.y) == len(self.subjects) == len(X):
            raise ValueError("X, y and subjects must have equal length")

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[Segment]:
        for i in range(len(self)):
            yield self.segment(i)

    def __getitem__(self, idx) -> "SegmentSet":
        return SegmentSet(self.X[idx], self.y[idx], self.subjects[idx], self.fs)

    def segment(self, i: int) -> Segment:
        return Segment(self.X[i], self.fs, int(self.y[i]), int(self.subjects[i]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[1], self.X.shape[2]

    def classes(self) -> np.ndarray:
        return np.unique(self.y)

    def subject_ids(self) -> np.ndarray:
        return np.unique(self.subjects)

    def of_subjects(self, ids) -> "SegmentSet":
        return self[np.isin(self.subjects, list(ids))]

    def with_X(self, X: np.ndarray) -> "SegmentSet":
        return SegmentSet(X, self.y, self.subjects, self.fs)

    @staticmethod
    def concat(parts: Sequence["SegmentSet"]) -> "SegmentSet":
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return SegmentSet(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                          np.concatenate([p.subjects for p in parts]), parts[0].fs)

    @classmethod
    def from_segments(cls, segments: Sequence[Segment]) -> "SegmentSet":
        return cls(np.stack([s.data for s in segments]), [s.label for s in segments],
                   [s.subject for s in segments], segments[0].fs)


def subject_rng(seed: int, subject: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(subject,)))


def _subject_segments(manifest: DatasetManifest, subject: int) -> tuple[np.ndarray, np.ndarray]:
    rng = subject_rng(manifest.seed, subject)
    E, T, fs, C = manifest.n_electrodes, manifest.length, manifest.fs, manifest.n_classes
    n = manifest.segments_per_subject_per_class
    F = T // 2 + 1
    scale = rng.uniform(*manifest.amplitude_scale_range)
    kappa = rng.uniform(*manifest.noise_exponent_range)
    gains = rng.uniform(0.8, 1.25, size=E)
    freqs = bin_frequencies(T, fs)
    colour = np.zeros(F)
    colour[1:] = freqs[1:] ** (-kappa / 2)
    # expected |X_k|^2 of the background (coloured + white) per bin and electrode
    bg_power = (2 * colour**2 * (T / 2) + manifest.white_noise_std**2 * T)[None, :] * gains[:, None] ** 2

    labels = np.repeat(np.arange(C), n)
    N = len(labels)
    spec = rng.standard_normal((N, E, F)) + 1j * rng.standard_normal((N, E, F))
    spec *= colour * gains[:, None] * np.sqrt(T / 2)
    X = np.fft.irfft(spec, n=T, axis=-1)
    X += manifest.white_noise_std * rng.standard_normal(X.shape) * gains[:, None]

    # class oscillation: fixed-amplitude, random-phase tones lifting band power to boost x background
    osc = np.zeros((N, E, F), dtype=complex)
    for c, prof in enumerate(manifest.class_profiles):
        rows = np.flatnonzero(labels == c)
        bins = np.flatnonzero((freqs >= prof.band[0]) & (freqs <= prof.band[1]))
        el = np.asarray(prof.electrodes)
        amp = np.sqrt((prof.boost - 1.0) * bg_power[np.ix_(el, bins)])
        jitter = rng.uniform(0.85, 1.15, size=(len(rows), 1, 1))
        phase = rng.uniform(-np.pi, np.pi, size=(len(rows), len(el), len(bins)))
        osc[np.ix_(rows, el, bins)] = amp * jitter * np.exp(1j * phase)
    X += np.fft.irfft(osc, n=T, axis=-1)
    X *= scale
    return X, labels


def generate_synthetic(manifest: DatasetManifest, seed: int | None = None) -> SegmentSet:
    """Deterministic synthetic dataset: 1/f^kappa background, class band boosts, white noise.

    Each subject draws its own amplitude scale, noise exponent and electrode
    gains from a stream derived from (seed, subject index).
    """
    if seed is not None:
        manifest = replace(manifest, seed=seed)
    manifest.validate()
    Xs, ys, ss = [], [], []
    for s in range(manifest.n_subjects):
        X, y = _subject_segments(manifest, s)
        Xs.append(X)
        ys.append(y)
        ss.append(np.full(len(y), s))
    return SegmentSet(np.concatenate(Xs), np.concatenate(ys), np.concatenate(ss), manifest.fs)


@dataclass
class DatasetSplits:
    train: SegmentSet
    poison_source: SegmentSet
    test: SegmentSet
    validation: SegmentSet
    poison_subject: int = -1
    test_subject: int = -1
    validation_subject: int = -1


def split_loso(dataset: SegmentSet, poison_subject: int, test_subject: int,
               validation_subject: int | None = None) -> DatasetSplits:
    """Poison subject -> D_p, test subject -> D_test, one more subject -> validation, rest -> D_train.

    Without an explicit choice the validation subject is the first remaining
    subject after ``test_subject`` in cyclic order.
    """
    ids = [int(s) for s in dataset.subject_ids()]
    if len(ids) < 4:
        raise ValueError(f"LOSO split needs at least 4 subjects, dataset has {len(ids)}")
    if poison_subject == test_subject:
        raise ValueError("poison and test subject must differ")
    for s in (poison_subject, test_subject):
        if s not in ids:
            raise ValueError(f"subject {s} not in dataset")
    rest = [s for s in ids if s not in (poison_subject, test_subject)]
    if validation_subject is None:
        after = [s for s in rest if s > test_subject]
        validation_subject = after[0] if after else rest[0]
    elif validation_subject not in rest:
        raise ValueError(f"validation subject {validation_subject} must be distinct and present")
    train_ids = [s for s in rest if s != validation_subject]
    return DatasetSplits(
        train=dataset.of_subjects(train_ids),
        poison_source=dataset.of_subjects([poison_subject]),
        test=dataset.of_subjects([test_subject]),
        validation=dataset.of_subjects([validation_subject]),
        poison_subject=poison_subject,
        test_subject=test_subject,
        validation_subject=validation_subject,
    )


class TriggerBank:
    """One trigger segment per class, drawn from the poisoning subject."""

    def __init__(self, triggers: Sequence[Segment]):
        triggers = list(triggers)
        for c, t in enumerate(triggers):
            if t.label != c:
                raise ValueError(f"trigger {c} carries label {t.label}")
        shapes = {(t.data.shape, t.fs) for t in triggers}
        if len(shapes) != 1:
            raise ValueError("triggers must share shape and sampling rate")
        self.triggers = triggers

    def __len__(self) -> int:
        return len(self.triggers)

    def __getitem__(self, c: int) -> Segment:
        return self.triggers[c]

    def array(self) -> np.ndarray:
        return np.stack([t.data for t in self.triggers])


def select_triggers(poison_source: SegmentSet, policy: str = "first", seed: int = 0,
                    n_classes: int | None = None) -> TriggerBank:
    C = n_classes if n_classes is not None else int(poison_source.y.max()) + 1
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(C):
        idx = np.flatnonzero(poison_source.y == c)
        if not len(idx):
            raise ValueError(f"poison source has no segment of class {c}")
        if policy == "first":
            picks.append(idx[0])
        elif policy == "random":
            picks.append(rng.choice(idx))
        else:
            raise ValueError(f"unknown trigger policy {policy!r}")
    return TriggerBank([poison_source.segment(int(i)) for i in picks])


def poison_count(rho: float, n_reference: int) -> int:
    if not 0.0 < rho < 1.0:
        raise ValueError(f"poisoning ratio must lie in (0, 1), got {rho}")
    return round_half_up(rho * n_reference)


def balanced_counts(total: int, n_classes: int) -> list[int]:
    base, extra = divmod(total, n_classes)
    return [base + (1 if c < extra else 0) for c in range(n_classes)]


def poison_class(poison_source: SegmentSet, trigger: Segment, strategy: InjectionStrategy,
                 count: int, rng: np.random.Generator) -> SegmentSet:
    """``count`` clean-label poisons of the trigger's class, sampled without replacement."""
    c = trigger.label
    idx = np.flatnonzero(poison_source.y == c)
    if count > len(idx):
        raise ValueError(f"class {c}: {count} poisoned segments requested, poison source holds only {len(idx)}")
    chosen = np.sort(rng.choice(idx, size=count, replace=False)) if count else idx[:0]
    part = poison_source[chosen]
    if not count:
        return part
    E, T = part.shape
    mask = make_mask(strategy, E, T // 2 + 1)
    return part.with_X(inject_array(part.X, trigger.data, mask, strategy.alpha))


def build_poison_set(poison_source: SegmentSet, bank: TriggerBank, strategies: Mapping[int, InjectionStrategy],
                     rho: float, n_train: int, seed: int = 0) -> SegmentSet:
    """M = round(rho * n_train) clean-label poisons balanced across classes.

    Class ``c`` samples are drawn without replacement from the poison source
    and injected with trigger ``c`` under strategy ``c``; labels stay ``c``.
    """
    C = len(bank)
    missing = [c for c in range(C) if c not in strategies]
    if missing:
        raise ValueError(f"no strategy for classes {missing}")
    counts = balanced_counts(poison_count(rho, n_train), C)
    need = [(c, n, int(np.sum(poison_source.y == c))) for c, n in enumerate(counts)]
    short = [f"class {c}: need {n}, have {have}" for c, n, have in need if n > have]
    if short:
        raise ValueError("poison source too small (" + "; ".join(short) + ")")
    rng = np.random.default_rng(seed)
    parts = [poison_class(poison_source, bank[c], strategies[c], counts[c], rng) for c in range(C)]
    X = np.concatenate([p.X for p in parts])
    return SegmentSet(X, np.concatenate([p.y for p in parts]), np.concatenate([p.subjects for p in parts]),
                      poison_source.fs)


# persistence ----------------------------------------------------------------

def save_dataset(dataset: SegmentSet, manifest: DatasetManifest, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    E, T = dataset.shape
    for s in dataset.subject_ids():
        part = dataset.of_subjects([s])
        with open(directory / f"subject_{int(s):03d}.sbkd", "wb") as fh:
            fh.write(SUBJECT_MAGIC)
            fh.write(struct.pack("<IIII", FORMAT_VERSION, len(part), E, T))
            for x, y in zip(part.X, part.y):
                fh.write(struct.pack("<H", int(y)))
                fh.write(x.astype("<f4").tobytes(order="C"))
    return directory


def read_subject_file(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != SUBJECT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, n, E, T = struct.unpack_from("<IIII", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    rec = np.dtype([("label", "<u2"), ("x", "<f4", (E, T))])
    body = np.frombuffer(raw, dtype=rec, count=n, offset=20)
    return body["x"].astype(np.float64), body["label"].astype(int)


def load_dataset(directory) -> tuple[SegmentSet, DatasetManifest]:
    directory = Path(directory)
    manifest = DatasetManifest.from_dict(json.loads((directory / "manifest.json").read_text(encoding="utf-8")))
    if manifest.format_version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.format_version}")
    Xs, ys, ss = [], [], []
    for path in sorted(directory.glob("subject_*.sbkd")):
        X, y = read_subject_file(path)
        Xs.append(X)
        ys.append(y)
        ss.append(np.full(len(y), int(path.stem.split("_")[1])))
    if not Xs:
        raise ValueError(f"{directory}: no subject files")
    return SegmentSet(np.concatenate(Xs), np.concatenate(ys), np.concatenate(ss), manifest.fs), manifest
