import numpy as np
import pytest
from hypothesis import given, strategies as st

from freqbackdoor.attacks import (
    AttackConfig,
    adver_mt,
    apply_spatial_filter,
    comp_mt,
    comp_mt_array,
    default_compress_ratios,
    default_patch_constants,
    default_pulse_amplitudes,
    learn_spatial_filter,
    load_spatial_filters,
    mse,
    patch_mt,
    patch_mt_array,
    poison_with,
    professor_x,
    pulse_mt_array,
    pulse_train,
    save_spatial_filters,
    trigger_fn,
)
from freqbackdoor.data import select_triggers
from freqbackdoor.models import Classifier, ClassifierSpec, TrainConfig, fit
from freqbackdoor.signal import InjectionStrategy, Segment, inject_frequency

RNG = np.random.default_rng(0)


def seg(E=4, T=20, seed=0):
    return Segment(np.random.default_rng(seed).standard_normal((E, T)) * 3 + 1.5, 20.0)


def zstats(x):
    return x.mean(), x.std()


class TestProfessorX:
    def test_same_as_injection(self, small_splits):
        bank = select_triggers(small_splits.poison_source)
        strategies = {c: InjectionStrategy(c, (c,), (10, 20)) for c in range(3)}
        clean = small_splits.test.segment(0)
        for c in range(3):
            np.testing.assert_array_equal(professor_x(clean, bank, strategies, c).data,
                                          inject_frequency(clean, bank[c], strategies[c]).data)

    def test_batched_trigger_fn(self, small_splits):
        bank = select_triggers(small_splits.poison_source)
        strategies = {c: InjectionStrategy(c, (0, 1), (10,)) for c in range(3)}
        fn = trigger_fn(AttackConfig("professor_x"), 3, bank, strategies)
        X = small_splits.test.X[:4]
        out = fn(X, 2)
        for i in range(4):
            np.testing.assert_allclose(out[i], professor_x(small_splits.test.segment(i), bank, strategies, 2).data,
                                       atol=1e-12)


class TestPatch:
    def test_class_constant_in_normalized_units(self):
        x = seg()
        out = patch_mt(x, 1, (-0.1, 0.0, 1.0)).data
        m, s = zstats(x.data)
        np.testing.assert_allclose((out[:2, :2] - m) / s, 0.0, atol=1e-12)
        out2 = patch_mt(x, 2, (-0.1, 0.0, 1.0)).data
        np.testing.assert_allclose((out2[:2, :2] - m) / s, 1.0, atol=1e-12)

    def test_locality(self):
        x = seg()
        out = patch_mt(x, 0, (-0.1, 0.0, 1.0)).data
        outside = np.ones_like(out, dtype=bool)
        outside[:2, :2] = False
        assert np.array_equal(out[outside], x.data[outside])

    def test_defaults(self):
        assert default_patch_constants(3) == (-0.1, 0.0, 1.0)
        assert default_patch_constants(4) == (0.0, 1.0, 2.0, 3.0)


class TestPulse:
    def test_train_shape(self):
        np.testing.assert_array_equal(pulse_train(10, 5, 0.4), [1, 1, 0, 0, 0, 1, 1, 0, 0, 0])
        with pytest.raises(ValueError):
            pulse_train(10, 0, 0.5)

    def test_amplitude_class_three(self):
        x = np.random.default_rng(1).standard_normal((4, 40)) * 2 + 1
        amps = (-0.8, -0.3, 0.3, 0.8)
        out = pulse_mt_array(x, 3, amps, period=8, duty=0.25)
        m, s = zstats(x)
        diff = (out - x) / s
        expect = 0.8 * pulse_train(40, 8, 0.25)
        np.testing.assert_allclose(diff[:2], np.stack([expect] * 2), atol=1e-12)
        assert np.array_equal(out[2:], x[2:])

    def test_zero_amplitude_identity(self):
        x = np.random.default_rng(2).standard_normal((4, 40))
        np.testing.assert_allclose(pulse_mt_array(x, 0, (0.0, 1.0)), x, atol=1e-12)

    def test_defaults_truncated(self):
        assert default_pulse_amplitudes(4) == (-0.8, -0.3, 0.3, 0.8)
        assert len(default_pulse_amplitudes(3)) == 3


class TestComp:
    def test_identity(self):
        x = seg()
        np.testing.assert_allclose(comp_mt(x, 0, (1.0,)).data, x.data, atol=1e-12)

    @given(st.floats(0.05, 1.0), st.integers(0, 1000))
    def test_scales_std(self, ratio, seed):
        x = np.random.default_rng(seed).standard_normal((3, 16))
        out = comp_mt_array(x, 0, (ratio,))
        assert out.std() == pytest.approx(ratio * x.std(), rel=1e-9)
        assert out.mean() == pytest.approx(x.mean(), abs=1e-9)

    def test_default_ratios(self):
        x = np.random.default_rng(3).standard_normal((3, 16))
        out = comp_mt_array(x, 2, default_compress_ratios(3))
        assert abs(out.std() - 0.4 * x.std()) < 1e-9


@pytest.fixture(scope="module")
def local():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 3, 16))
    y = rng.integers(3, size=30)
    X[np.arange(30), y, :] += 1.0
    model = Classifier(ClassifierSpec("softmax_reg", (3, 16), 3, seed=0))
    fit(model, X, y, TrainConfig(lr=0.05, epochs=5))
    return model, X, y


class TestAdver:
    def test_zero_steps_identity(self, local):
        model, X, y = local
        W = learn_spatial_filter(model, X, y, steps=0)
        np.testing.assert_array_equal(W, np.eye(3))
        np.testing.assert_array_equal(apply_spatial_filter(W, X), X)

    def test_heavy_mse_stays_near_identity(self, local):
        model, X, y = local
        W = learn_spatial_filter(model, X, y, alpha_mse=1e6, steps=50, lr=0.01)
        assert np.max(np.abs(W - np.eye(3))) < 0.05

    def test_mse_below_random_filter(self, local):
        model, X, y = local
        W = learn_spatial_filter(model, X, y, alpha_mse=1.0, steps=50, lr=0.01)
        Wr = np.random.default_rng(9).standard_normal((3, 3))
        assert mse(apply_spatial_filter(W, X), X) <= mse(apply_spatial_filter(Wr, X), X)

    def test_per_class_filters(self, small_splits):
        spec = ClassifierSpec("softmax_reg", (8, 128), 3)
        F = adver_mt(small_splits.poison_source, 3, spec, TrainConfig(epochs=1), steps=3)
        assert F.shape == (3, 8, 8)

    def test_spatial_file_roundtrip(self, tmp_path):
        F = np.random.default_rng(4).standard_normal((3, 5, 5))
        path = save_spatial_filters(tmp_path / "w.sbkw", F, {"note": "x"})
        assert path.read_bytes()[:4] == b"SBKW"
        np.testing.assert_array_equal(load_spatial_filters(path), F.astype(np.float32))
        with pytest.raises(ValueError):
            save_spatial_filters(tmp_path / "bad.sbkw", np.zeros((2, 3, 4)))


class TestDispatch:
    def test_none_is_identity(self):
        X = RNG.standard_normal((2, 3, 8))
        np.testing.assert_array_equal(trigger_fn(AttackConfig("none"), 3)(X, 1), X)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AttackConfig("blend")

    def test_wrong_constant_count(self):
        with pytest.raises(ValueError):
            trigger_fn(AttackConfig("patch_mt", constants=[0.0, 1.0]), 3)

    def test_missing_inputs(self):
        with pytest.raises(ValueError):
            trigger_fn(AttackConfig("professor_x"), 3)
        with pytest.raises(ValueError):
            trigger_fn(AttackConfig("adver_mt"), 3)

    @pytest.mark.parametrize("kind", ["patch_mt", "pulse_mt", "comp_mt"])
    def test_poison_with_is_clean_label(self, small_splits, kind):
        fn = trigger_fn(AttackConfig(kind), 3)
        src = small_splits.poison_source
        P = poison_with(src, fn, 3, 0.4, len(src), seed=2)
        assert len(P) == round(0.4 * len(src))
        for c in range(3):
            part = P.X[P.y == c]
            # every poison is the class trigger applied to some class-c source segment
            cands = fn(src.X[src.y == c], c)
            for x in part:
                assert np.any(np.all(np.isclose(cands, x[None], atol=1e-12), axis=(1, 2)))

    def test_poison_with_too_many(self, small_splits):
        src = small_splits.poison_source
        with pytest.raises(ValueError):
            poison_with(src, trigger_fn(AttackConfig("comp_mt"), 3), 3, 0.9, 100 * len(src))
