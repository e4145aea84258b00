import numpy as np
import pytest
from hypothesis import settings

from freqbackdoor.data import DatasetManifest, generate_synthetic, split_loso

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def naive_rdft(x):
    """O(T^2) real DFT over the last axis, bins 0..T/2."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    k = np.arange(T // 2 + 1)[:, None]
    t = np.arange(T)[None, :]
    W = np.exp(-2j * np.pi * k * t / T)
    return x @ W.T


def naive_irdft(spectrum, T):
    """Inverse of naive_rdft via the conjugate-symmetric full spectrum."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    full = np.concatenate([spectrum, np.conj(spectrum[..., 1 : T // 2][..., ::-1])], axis=-1)
    k = np.arange(T)[None, :]
    t = np.arange(T)[:, None]
    W = np.exp(2j * np.pi * k * t / T)
    return (full @ W.T).real / T


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(DatasetManifest(n_subjects=5, segments_per_subject_per_class=12, seed=11))


@pytest.fixture(scope="session")
def small_splits(small_dataset):
    return split_loso(small_dataset, 0, 1)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
