import numpy as np
import pytest

from eegscribe.exceptions import (
    ContractError,
    DecompositionError,
    DimensionError,
    ParameterError,
)
from eegscribe.preprocess import (
    FoldAssignment,
    PreprocessConfig,
    SessionPreprocessor,
    average_reference,
    butter_bandpass,
    extract_epochs,
    fast_ica,
    load_folds,
    make_folds,
    normalize_trajectory,
    preprocess_session,
    reject_eog,
    save_folds,
    znorm_channels,
)
from eegscribe.session import PEN_DOWN, PEN_UP, PenEvent, RawSession
from eegscribe.synth import SynthConfig, gen_session

FS = 250.0


class TestAverageReference:
    def test_identical_channels_become_zero(self):
        eeg = np.tile(np.sin(np.linspace(0, 10, 500)), (32, 1))
        np.testing.assert_allclose(average_reference(eeg), 0.0, atol=1e-12)

    def test_already_zero_mean_unchanged(self):
        a = np.sin(np.linspace(0, 7, 300))
        eeg = np.stack([a, -a])
        np.testing.assert_allclose(average_reference(eeg), eeg, atol=1e-12)

    def test_hand_example(self):
        out = average_reference(np.array([[1.0], [2.0], [3.0]]))
        np.testing.assert_allclose(out, [[-1.0], [0.0], [1.0]], atol=1e-12)

    def test_column_sums_vanish(self):
        rng = np.random.default_rng(0)
        out = average_reference(rng.standard_normal((32, 400)) * 100)
        np.testing.assert_allclose(out.sum(axis=0), 0.0, atol=1e-9)

    def test_single_channel_rejected(self):
        with pytest.raises(ContractError):
            average_reference(np.ones((1, 100)))


class TestButterBandpass:
    def _sine(self, freq, seconds=20.0):
        t = np.arange(int(seconds * FS)) / FS
        return np.sin(2 * np.pi * freq * t)

    def _impulse_response_gain(self, low, high, freq):
        # FFT oracle: magnitude response of the zero-phase filter at freq
        n = 1 << 15
        imp = np.zeros(n)
        imp[n // 2] = 1.0
        h = butter_bandpass(imp, low, high)[0]
        mags = np.abs(np.fft.rfft(h))
        freqs = np.fft.rfftfreq(n, 1.0 / FS)
        return mags[np.argmin(np.abs(freqs - freq))]

    def test_passband_10hz(self):
        x = self._sine(10.0)
        y = butter_bandpass(x[None, :], 1.0, 45.0)[0]
        interior = slice(int(FS), -int(FS))
        ratio = y[interior].std() / x[interior].std()  # RMS amplitude ratio
        assert abs(ratio - 1.0) < 0.02
        assert abs(self._impulse_response_gain(1.0, 45.0, 10.0) - ratio) < 0.02

    def test_stopband_60hz(self):
        x = self._sine(60.0)
        y = butter_bandpass(x[None, :], 1.0, 45.0)[0]
        interior = slice(int(FS), -int(FS))
        ratio = y[interior].std() / x[interior].std()
        assert ratio < 0.10
        assert self._impulse_response_gain(1.0, 45.0, 60.0) < 0.10

    def test_dc_rejected_by_narrow_band(self):
        x = np.full(int(20 * FS), 7.5)
        y = butter_bandpass(x[None, :], 0.5, 8.0)[0]
        interior = slice(int(FS), -int(FS))
        assert np.abs(y[interior]).max() < 1e-3 * 7.5

    def test_invalid_cutoffs(self):
        x = np.ones((1, 5000))
        for low, high in [(0.0, 10.0), (10.0, 5.0), (1.0, 130.0), (-1.0, 45.0)]:
            with pytest.raises(ParameterError):
                butter_bandpass(x, low, high)

    def test_too_short_signal(self):
        with pytest.raises(ContractError):
            butter_bandpass(np.ones((1, 20)), 1.0, 45.0)

    def test_zero_phase_no_group_delay(self):
        rng = np.random.default_rng(1)
        x = butter_bandpass(rng.standard_normal((1, 4000)), 5.0, 15.0)[0]
        y = butter_bandpass(x[None, :], 1.0, 45.0)[0]
        xc = np.correlate(x, y, mode="full")
        assert np.argmax(xc) == len(x) - 1  # peak at lag 0

    def test_output_length_preserved(self):
        out = butter_bandpass(np.random.default_rng(0).standard_normal((3, 1000)), 1.0, 45.0)
        assert out.shape == (3, 1000)


class TestFastICA:
    def _laplace_mixture(self, seed=0, n_sources=3, n_channels=8, n_samples=10_000):
        rng = np.random.default_rng(seed)
        sources = rng.laplace(size=(n_sources, n_samples))
        mixing = rng.standard_normal((n_channels, n_sources))
        return mixing @ sources, sources

    def test_recovers_super_gaussian_sources(self):
        mixed, sources = self._laplace_mixture()
        result = fast_ica(mixed, 3, seed=0)
        assert result.converged.all()
        corr = np.corrcoef(np.vstack([result.sources, sources]))[:3, 3:]
        matched = np.abs(corr).max(axis=1)
        assert (matched > 0.95).all(), matched
        # each true source matched by some component
        assert (np.abs(corr).max(axis=0) > 0.95).all()

    def test_white_input_gives_signed_permutation(self):
        rng = np.random.default_rng(5)
        # unit-variance Laplace: already independent and white
        x = rng.laplace(size=(4, 60_000)) / np.sqrt(2.0)
        result = fast_ica(x, 4, seed=1)
        u = result.unmixing
        assert abs(abs(np.linalg.det(u)) - 1.0) < 0.05
        for row in u:
            top = np.sort(np.abs(row))[::-1]
            assert top[0] > 0.95 and top[1] < 0.05

    def test_rank_deficiency_raises(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal((3, 5000))
        dup = np.vstack([base, base[0]])
        with pytest.raises(DecompositionError):
            fast_ica(dup, 4, seed=0)

    def test_deterministic_under_seed(self):
        mixed, _ = self._laplace_mixture(seed=3)
        a = fast_ica(mixed, 3, seed=7)
        b = fast_ica(mixed, 3, seed=7)
        assert np.array_equal(a.unmixing, b.unmixing)

    def test_unmixing_rows_unit_norm_in_whitened_space(self):
        mixed, _ = self._laplace_mixture(seed=4)
        result = fast_ica(mixed, 3, seed=0)
        # rows unit-norm in whitened space <=> sources have unit variance
        np.testing.assert_allclose(result.sources.std(axis=1), 1.0, atol=1e-6)


class TestRejectEog:
    def _blinky_mixture(self, seed=0):
        rng = np.random.default_rng(seed)
        n_samples = 12_000
        sources = rng.laplace(size=(3, n_samples))
        mixing = rng.standard_normal((8, 3))
        mixing[0] *= 0.25  # frontal channel carries little brain signal
        clean = mixing @ sources
        blink = np.zeros(n_samples)
        width = 80
        pulse = np.sin(np.pi * np.arange(width) / (width - 1)) ** 2
        for s in range(200, n_samples - width, 900):
            blink[s:s + width] = pulse
        blink *= 12.0
        blink_col = np.exp(-np.arange(8) / 1.2)
        contaminated = clean + blink_col[:, None] * blink[None, :]
        return clean, contaminated, blink

    def test_planted_blink_removed(self):
        clean, contaminated, blink = self._blinky_mixture()
        result = fast_ica(contaminated, 4, seed=0)
        cleaned = reject_eog(result.sources, result.unmixing, contaminated[0], 0.7)
        cc = clean - clean.mean(axis=1, keepdims=True)
        err_before = np.linalg.norm(contaminated - contaminated.mean(axis=1, keepdims=True) - cc)
        err_after = np.linalg.norm(cleaned - cc)
        assert err_after <= 0.5 * err_before
        # exactly one component rejected: the blink
        corr = [
            abs(np.corrcoef(s, blink)[0, 1]) for s in result.sources
        ]
        assert sum(c > 0.7 for c in corr) == 1

    def test_nothing_rejected_round_trips(self):
        rng = np.random.default_rng(1)
        x = rng.laplace(size=(5, 8000))
        mixed = rng.standard_normal((5, 5)) @ x
        result = fast_ica(mixed, 5, seed=0)
        # threshold above any plausible correlation with an unrelated reference
        cleaned = reject_eog(result.sources, result.unmixing, rng.standard_normal(8000), 0.999)
        full = np.linalg.pinv(result.unmixing) @ result.sources
        np.testing.assert_allclose(cleaned, full, atol=1e-8)

    def test_zero_threshold_rejects_everything(self):
        rng = np.random.default_rng(2)
        sources = rng.laplace(size=(3, 1000))
        with pytest.raises(ContractError):
            reject_eog(sources, np.eye(3), rng.standard_normal(1000), 0.0)


def _toy_session(n_trials=12, n_channels=4, spacing=300, lead=50):
    rng = np.random.default_rng(0)
    n_samples = lead + n_trials * spacing + 250
    eeg = rng.standard_normal((n_channels, n_samples))
    events = []
    kin = np.zeros((n_samples, 5))
    kin[:, 0] = np.arange(n_samples)
    kin[:, 1] = np.linspace(0, 10, n_samples)
    kin[:, 2] = np.linspace(5, 6, n_samples)
    kin[:, 3] = 0.5
    kin[:, 4] = 1.0
    for i in range(n_trials):
        t0 = lead + i * spacing
        events.append(PenEvent(t0, PEN_DOWN, i % 9))
        events.append(PenEvent(t0 + 249, PEN_UP, i % 9))
    return RawSession(eeg=eeg, events=events, kinematics=kin)


class TestExtractEpochs:
    def test_window_is_exact_slice(self):
        session = _toy_session()
        es = extract_epochs(session)
        t0 = session.pen_down_events()[0].sample_index
        np.testing.assert_array_equal(es.epochs[0], session.eeg[:, t0:t0 + 250])

    def test_twelve_pen_downs_give_twelve_epochs(self):
        session, _ = gen_session(SynthConfig(n_repetitions=1, seed=0))
        es = extract_epochs(session)
        assert len(es) == 12

    def test_trailing_trial_dropped(self):
        session = _toy_session()
        # append a pen-down too close to the end
        last = session.eeg.shape[1] - 100
        events = session.events + [
            PenEvent(last, PEN_DOWN, 0),
            PenEvent(last + 50, PEN_UP, 0),
        ]
        session2 = RawSession(eeg=session.eeg, events=events, kinematics=session.kinematics)
        es = extract_epochs(session2)
        assert len(es) == 12 and es.dropped_trials == 1

    def test_labels_follow_events(self):
        session = _toy_session()
        es = extract_epochs(session)
        np.testing.assert_array_equal(es.labels, [e.char_class for e in session.pen_down_events()])


class TestZnorm:
    def test_constant_channel_becomes_zeros(self):
        epochs = np.ones((1, 2, 250))
        np.testing.assert_array_equal(znorm_channels(epochs), np.zeros_like(epochs))

    def test_two_point_toy(self):
        out = znorm_channels(np.array([0.0, 2.0]).reshape(1, 1, 2))
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        epochs = rng.standard_normal((3, 4, 250)) * 40 + 7
        once = znorm_channels(epochs)
        twice = znorm_channels(once)
        np.testing.assert_allclose(twice, once, atol=1e-9)
        np.testing.assert_allclose(once.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(once.std(axis=-1), 1.0, atol=1e-9)


class TestNormalizeTrajectory:
    def _segment(self, x, y, pressure=None, velocity=None):
        m = len(x)
        return np.stack(
            [
                np.arange(m, dtype=float),
                np.asarray(x, dtype=float),
                np.asarray(y, dtype=float),
                np.full(m, 0.5) if pressure is None else np.asarray(pressure, float),
                np.ones(m) if velocity is None else np.asarray(velocity, float),
            ],
            axis=1,
        )

    def test_linear_ramp_maps_to_linspace(self):
        seg = self._segment(np.linspace(0, 10, 50), np.linspace(0, 3, 50))
        out = normalize_trajectory(seg)
        np.testing.assert_allclose(out[0], np.linspace(0, 1, 250), atol=1e-9)

    def test_origin_shift_before_scaling(self):
        seg = self._segment(np.linspace(5, 9, 30), np.linspace(7, 8, 30))
        times = seg[:, 0]
        grid = np.linspace(times[0], times[-1], 250)
        x = np.interp(grid, times, seg[:, 1]) - 5.0
        assert x[0] == 0.0  # shifted start precedes min-max scaling
        out = normalize_trajectory(seg)
        assert out[0, 0] == 0.0 and out[1, 0] == 0.0

    def test_constant_row_becomes_zeros(self):
        seg = self._segment(np.linspace(0, 1, 20), np.linspace(0, 1, 20))
        out = normalize_trajectory(seg)
        np.testing.assert_array_equal(out[2], np.zeros(250))  # constant pressure

    def test_rows_within_unit_interval(self):
        rng = np.random.default_rng(0)
        seg = self._segment(
            rng.standard_normal(40).cumsum(),
            rng.standard_normal(40).cumsum(),
            rng.uniform(0.2, 1.0, 40),
            rng.uniform(0.5, 2.0, 40),
        )
        out = normalize_trajectory(seg)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            normalize_trajectory(self._segment([1.0], [2.0]))

    def test_idempotent_on_normalized_output(self):
        seg = self._segment(np.linspace(0, 4, 60) ** 1.3, np.sin(np.linspace(0, 2, 60)))
        out = normalize_trajectory(seg)
        again = normalize_trajectory(
            np.concatenate([np.arange(250)[:, None], out.T], axis=1)
        )
        np.testing.assert_allclose(again, out, atol=1e-9)


class TestMakeFolds:
    def test_divisible_stratification(self):
        labels = np.repeat(np.arange(9), 10)
        folds = make_folds(labels, seed=0)
        for k in range(5):
            idx = folds.indices(k)
            np.testing.assert_array_equal(np.bincount(labels[idx], minlength=9), 2)

    def test_five_trials_five_folds(self):
        folds = make_folds(np.arange(5), seed=0)
        assert sorted(folds.fold_of_trial.tolist()) == [0, 1, 2, 3, 4]

    def test_deterministic(self):
        labels = np.random.default_rng(0).integers(0, 9, 83)
        a = make_folds(labels, seed=9)
        b = make_folds(labels, seed=9)
        np.testing.assert_array_equal(a.fold_of_trial, b.fold_of_trial)

    def test_partition(self):
        labels = np.random.default_rng(1).integers(0, 9, 61)
        folds = make_folds(labels, seed=2)
        all_idx = np.concatenate(folds.fold_lists())
        assert sorted(all_idx.tolist()) == list(range(61))

    def test_counts_differ_by_at_most_one(self):
        labels = np.random.default_rng(2).integers(0, 9, 107)
        folds = make_folds(labels, seed=3)
        for c in range(9):
            per_fold = [
                int((labels[folds.indices(k)] == c).sum()) for k in range(5)
            ]
            assert max(per_fold) - min(per_fold) <= 1

    def test_too_few_trials(self):
        with pytest.raises(ContractError):
            make_folds(np.array([0, 1, 2]), seed=0)


@pytest.fixture(scope="module")
def processed():
    session, _ = gen_session(SynthConfig(n_repetitions=1, snr_db=10.0, seed=21))
    return preprocess_session(session, PreprocessConfig(seed=4))


class TestPipeline:
    def test_epoch_channels_normalized(self, processed):
        epochset, _, _ = processed
        nonzero = epochset.epochs.std(axis=-1) > 0
        np.testing.assert_allclose(epochset.epochs.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(epochset.epochs.std(axis=-1)[nonzero], 1.0, atol=1e-9)

    def test_manifest_records_bands(self, processed):
        _, _, manifest = processed
        assert manifest["band_wide_hz"] == [1.0, 45.0]
        assert manifest["band_narrow_hz"] == [0.5, 8.0]

    def test_fold_partition(self, processed):
        epochset, folds, _ = processed
        merged = np.concatenate(folds.fold_lists())
        assert sorted(merged.tolist()) == list(range(len(epochset)))

    def test_scrambled_order_needs_explicit_override(self):
        order = (
            "bandpass_wide",
            "average_reference",
            "ica_reject",
            "bandpass_narrow",
            "epoch",
            "normalize",
        )
        with pytest.raises(ParameterError):
            PreprocessConfig(stage_order=order)
        cfg = PreprocessConfig(stage_order=order, allow_custom_order=True)
        assert cfg.stage_order == order

    def test_estimator_wrapper_params(self):
        pre = SessionPreprocessor(eog_corr_threshold=0.8)
        assert pre.get_params()["eog_corr_threshold"] == 0.8
        pre.set_params(seed=5)
        assert pre._config().seed == 5

    def test_fold_files_round_trip(self, processed, tmp_path):
        epochset, folds, manifest = processed
        save_folds(tmp_path, epochset, folds, manifest)
        loaded, manifest_back = load_folds(tmp_path)
        assert manifest_back["band_wide_hz"] == [1.0, 45.0]
        total = sum(lab.size for _, _, lab in loaded)
        assert total == len(epochset)
        k0 = folds.indices(0)
        assert np.array_equal(loaded[0][0], epochset.epochs[k0])
        assert np.array_equal(loaded[0][2], epochset.labels[k0])
