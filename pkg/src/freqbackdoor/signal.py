"""Spectral kernel: real FFT with amplitude/phase split, masked amplitude
injection, brick-wall filters, spectral resampling and z-normalization.

Array-level helpers (``*_array``) operate on the trailing (E, T) axes so they
also accept batches shaped (N, E, T). The Segment-level wrappers add the
validation the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    data: np.ndarray
    fs: float
    label: int = 0
    subject: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise DimensionError(f"segment data must be E x T, got shape {data.shape}")
        E, T = data.shape
        if E < 1 or T < 2 or T % 2:
            raise DimensionError(f"segment needs E >= 1 and even T >= 2, got E={E}, T={T}")
        if not np.all(np.isfinite(data)):
            raise ValueError("segment contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_electrodes(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> "Segment":
        return replace(self, data=data)


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray
    original_length: int
    fs: float

    def __post_init__(self):
        F = self.original_length // 2 + 1
        if self.original_length % 2 or self.amplitude.shape[-1] != F or self.phase.shape != self.amplitude.shape:
            raise DimensionError(
                f"spectrum of length-{self.original_length} signal needs {F} bins, "
                f"got amplitude {self.amplitude.shape}, phase {self.phase.shape}"
            )

    @property
    def n_bins(self) -> int:
        return self.amplitude.shape[-1]

    def frequencies(self) -> np.ndarray:
        return bin_frequencies(self.original_length, self.fs)


@dataclass(frozen=True)
class InjectionStrategy:
    target_class: int
    electrodes: tuple[int, ...]
    freq_bins: tuple[int, ...]
    alpha: float = 0.8

    def __post_init__(self):
        electrodes = tuple(int(e) for e in self.electrodes)
        bins = tuple(int(k) for k in self.freq_bins)
        object.__setattr__(self, "electrodes", electrodes)
        object.__setattr__(self, "freq_bins", bins)
        if not electrodes or not bins:
            raise ValueError("strategy needs at least one electrode and one frequency bin")
        for name, idx in (("electrodes", electrodes), ("freq_bins", bins)):
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {idx}")
        if electrodes[0] < 0:
            raise ValueError("electrode indices must be non-negative")
        if bins[0] < 1:
            raise ValueError("DC bin (0) cannot be injected")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    def check_bounds(self, n_electrodes: int, n_bins: int) -> None:
        if self.electrodes[-1] >= n_electrodes:
            raise IndexError(f"electrode {self.electrodes[-1]} out of range for E={n_electrodes}")
        if self.freq_bins[-1] >= n_bins:
            raise IndexError(f"frequency bin {self.freq_bins[-1]} out of range for F={n_bins}")

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "electrodes": list(self.electrodes),
            "freq_bins": list(self.freq_bins),
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionStrategy":
        return cls(int(d["target_class"]), tuple(d["electrodes"]), tuple(d["freq_bins"]), float(d["alpha"]))


def bin_frequencies(T: int, fs: float) -> np.ndarray:
    return np.arange(T // 2 + 1) * (fs / T)


def _canonical_phase(X: np.ndarray) -> np.ndarray:
    phase = np.angle(X)
    # (-pi, pi]: np.angle yields -pi for negative reals with a -0.0 imaginary part
    phase[phase <= -np.pi] = np.pi
    # DC and Nyquist are real for real input; drop rounding residue in the imaginary part
    for k in (0, -1):
        phase[..., k] = np.where(X[..., k].real < 0, np.pi, 0.0)
    return phase


def rfft_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise DimensionError(f"signal length must be even, got {x.shape[-1]}")
    X = np.fft.rfft(x, axis=-1)
    return np.abs(X), _canonical_phase(X)


def irfft_array(amplitude: np.ndarray, phase: np.ndarray, T: int) -> np.ndarray:
    return np.fft.irfft(amplitude * np.exp(1j * phase), n=T, axis=-1)


def rfft(segment: Segment) -> Spectrum:
    A, P = rfft_array(segment.data)
    return Spectrum(A, P, segment.length, segment.fs)


def irfft(spectrum: Spectrum) -> np.ndarray:
    if np.any(spectrum.amplitude < 0):
        raise ValueError("amplitude must be non-negative")
    return irfft_array(spectrum.amplitude, spectrum.phase, spectrum.original_length)


def make_mask(strategy: InjectionStrategy, E: int, F: int) -> np.ndarray:
    strategy.check_bounds(E, F)
    mask = np.zeros((E, F))
    mask[np.ix_(strategy.electrodes, strategy.freq_bins)] = 1.0
    return mask


def inject_amplitude(A_clean: np.ndarray, A_trigger: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    """Blend trigger amplitude into the clean amplitude on the masked cells.

    Unmasked cells are copied from ``A_clean`` (not recomputed), so they are
    bitwise identical to the input.
    """
    A_clean, A_trigger = np.broadcast_arrays(A_clean, A_trigger)
    out = A_clean.copy()
    sel = np.broadcast_to(mask.astype(bool), out.shape)
    out[sel] = ((1.0 - alpha) * A_clean + alpha * A_trigger)[sel]
    return out


def inject_array(x: np.ndarray, trigger: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    """Frequency injection on raw arrays; ``x`` may be (E, T) or (N, E, T)."""
    A_x, P_x = rfft_array(x)
    A_t, _ = rfft_array(trigger)
    return irfft_array(inject_amplitude(A_x, A_t, mask, alpha), P_x, x.shape[-1])


def _check_pair(clean: Segment, trigger: Segment) -> None:
    if clean.data.shape != trigger.data.shape:
        raise DimensionError(f"clean {clean.data.shape} and trigger {trigger.data.shape} differ in shape")
    if clean.fs != trigger.fs:
        raise ValueError(f"sampling rates differ: {clean.fs} vs {trigger.fs}")


def poisoned_spectrum(clean: Segment, trigger: Segment, strategy: InjectionStrategy) -> Spectrum:
    _check_pair(clean, trigger)
    spec_x = rfft(clean)
    A_t, _ = rfft_array(trigger.data)
    mask = make_mask(strategy, clean.n_electrodes, spec_x.n_bins)
    A_p = inject_amplitude(spec_x.amplitude, A_t, mask, strategy.alpha)
    return Spectrum(A_p, spec_x.phase, clean.length, clean.fs)


def inject_frequency(clean: Segment, trigger: Segment, strategy: InjectionStrategy) -> Segment:
    """Poison ``clean`` with the trigger's amplitude on the strategy's cells; keeps the clean label."""
    return clean.with_data(irfft(poisoned_spectrum(clean, trigger, strategy)))


FILTER_MODES = ("remove_below", "remove_above")


def filter_mask(T: int, fs: float, mode: str, cutoff_hz: float) -> np.ndarray:
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    if not 0.0 < cutoff_hz < fs / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz outside (0, {fs / 2})")
    freqs = bin_frequencies(T, fs)
    return freqs < cutoff_hz if mode == "remove_below" else freqs > cutoff_hz


def filter_spectrum(spectrum: Spectrum, mode: str, cutoff_hz: float) -> Spectrum:
    drop = filter_mask(spectrum.original_length, spectrum.fs, mode, cutoff_hz)
    A = spectrum.amplitude.copy()
    A[..., drop] = 0.0
    return replace(spectrum, amplitude=A)


def filter_array(x: np.ndarray, fs: float, mode: str, cutoff_hz: float) -> np.ndarray:
    T = x.shape[-1]
    drop = filter_mask(T, fs, mode, cutoff_hz)
    X = np.fft.rfft(x, axis=-1)
    X[..., drop] = 0.0
    return np.fft.irfft(X, n=T, axis=-1)


def spectral_filter(segment: Segment, mode: str, cutoff_hz: float) -> Segment:
    return segment.with_data(filter_array(segment.data, segment.fs, mode, cutoff_hz))


def resampled_length(T: int, keep_ratio: float) -> int:
    if not 0.0 < keep_ratio < 1.0:
        raise ValueError(f"keep_ratio must lie in (0, 1), got {keep_ratio}")
    T_new = int(np.floor(keep_ratio * T + 0.5))
    if T_new < 2:
        raise DimensionError(f"downsampled length {T_new} < 2")
    if T_new % 2:
        raise DimensionError(f"downsampled length {T_new} is odd")
    return T_new


def downsample_array(x: np.ndarray, keep_ratio: float) -> np.ndarray:
    T = x.shape[-1]
    T_new = resampled_length(T, keep_ratio)
    X = np.fft.rfft(x, axis=-1)[..., : T_new // 2 + 1] * (T_new / T)
    return np.fft.irfft(X, n=T_new, axis=-1)


def downsample(segment: Segment, keep_ratio: float) -> Segment:
    T_new = resampled_length(segment.length, keep_ratio)
    return Segment(downsample_array(segment.data, keep_ratio), segment.fs * T_new / segment.length,
                   segment.label, segment.subject)


def znormalize_array(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(np.mean(x))
    std = float(np.std(x))
    if std <= 0.0:
        raise ValueError("cannot z-normalize a constant segment")
    return (x - mean) / std, mean, std


def denormalize_array(z: np.ndarray, mean: float, std: float) -> np.ndarray:
    return z * std + mean


def znormalize(segment: Segment) -> tuple[Segment, float, float]:
    z, mean, std = znormalize_array(segment.data)
    return segment.with_data(z), mean, std


def denormalize(segment: Segment, mean: float, std: float) -> Segment:
    return segment.with_data(denormalize_array(segment.data, mean, std))


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def subset_size(ratio: float, n: int) -> int:
    """Cardinality round(ratio * n), rounding halves up (0.1 * 65 -> 7)."""
    return round_half_up(ratio * n)


def band_power(x: np.ndarray, fs: float, lo_hz: float, hi_hz: float) -> np.ndarray:
    """Mean squared rfft amplitude over bins with lo <= f <= hi, per trailing row."""
    A, _ = rfft_array(x)
    freqs = bin_frequencies(x.shape[-1], fs)
    sel = (freqs >= lo_hz) & (freqs <= hi_hz)
    return np.mean(A[..., sel] ** 2, axis=-1)


def as_index_tuple(idx: Sequence[int]) -> tuple[int, ...]:
    return tuple(sorted(int(i) for i in idx))
