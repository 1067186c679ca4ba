import numpy as np
import pytest

from eegscribe.session import PEN_DOWN, PEN_UP, PHRASE_CLASSES, load_session, save_session
from eegscribe.synth import CHAR_TEMPLATES, SynthConfig, gen_character_trajectory, gen_session


@pytest.fixture(scope="module")
def small_session():
    return gen_session(SynthConfig(n_repetitions=2, snr_db=5.0, seed=11))


class TestCharacterTrajectory:
    def test_zero_jitter_is_bitwise_reproducible(self):
        a = gen_character_trajectory(CHAR_TEMPLATES[0], 0.0, np.random.default_rng(3))
        b = gen_character_trajectory(CHAR_TEMPLATES[0], 0.0, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_zero_jitter_follows_template_polyline(self):
        traj = gen_character_trajectory(CHAR_TEMPLATES[2], 0.0, np.random.default_rng(0))
        stroke = CHAR_TEMPLATES[2].stroke
        # every sampled point lies on some segment of the polyline
        for px, py in zip(traj[0], traj[1]):
            dists = []
            for (x0, y0), (x1, y1) in zip(stroke[:-1], stroke[1:]):
                d = np.array([x1 - x0, y1 - y0])
                v = np.array([px - x0, py - y0])
                s = np.clip(v @ d / (d @ d), 0, 1)
                dists.append(np.linalg.norm(v - s * d))
            assert min(dists) < 1e-9

    def test_velocity_is_central_difference_of_position_magnitude(self):
        traj = gen_character_trajectory(CHAR_TEMPLATES[5], 0.01, np.random.default_rng(7))
        x, y, _, vel = traj
        dt = 1.0 / 250.0
        interior = np.hypot((x[2:] - x[:-2]) / (2 * dt), (y[2:] - y[:-2]) / (2 * dt))
        np.testing.assert_allclose(vel[1:-1], interior, rtol=0, atol=1e-9)

    def test_distinct_classes_give_distinct_trajectories(self):
        rng = np.random.default_rng(0)
        a = gen_character_trajectory(CHAR_TEMPLATES[0], 0.0, rng)
        b = gen_character_trajectory(CHAR_TEMPLATES[1], 0.0, rng)
        assert np.max(np.abs(a[:2] - b[:2])) > 0

    def test_profiles_positive(self):
        traj = gen_character_trajectory(CHAR_TEMPLATES[8], 0.0, np.random.default_rng(1))
        assert np.all(traj[2] > 0)


class TestSession:
    def test_event_counts_single_repetition(self):
        session, _ = gen_session(SynthConfig(n_repetitions=1, seed=0))
        downs = [e for e in session.events if e.kind == PEN_DOWN]
        ups = [e for e in session.events if e.kind == PEN_UP]
        assert len(downs) == 12 and len(ups) == 12

    def test_label_frequencies_match_phrase(self, small_session):
        session, _ = small_session
        labels = [e.char_class for e in session.events if e.kind == PEN_DOWN]
        per_rep = labels[:12]
        counts = np.bincount(per_rep, minlength=9)
        # L x3, O x2, everything else once
        np.testing.assert_array_equal(counts, [1, 1, 3, 2, 1, 1, 1, 1, 1])
        assert list(PHRASE_CLASSES) == per_rep

    def test_same_seed_bitwise_identical(self):
        cfg = SynthConfig(n_repetitions=1, seed=42)
        s1, t1 = gen_session(cfg)
        s2, t2 = gen_session(cfg)
        assert np.array_equal(s1.eeg, s2.eeg)
        assert np.array_equal(s1.kinematics, s2.kinematics)
        assert np.array_equal(t1.mixing, t2.mixing)

    def test_noiseless_sources_recoverable_by_unmixing(self):
        cfg = SynthConfig(n_repetitions=1, snr_db=np.inf, blink_amplitude=0.0, seed=5)
        session, truth = gen_session(cfg)
        recovered = np.linalg.pinv(truth.mixing) @ session.eeg
        t0 = session.pen_down_events()[0].sample_index
        c = session.pen_down_events()[0].char_class
        np.testing.assert_allclose(
            recovered[:, t0:t0 + 250], truth.class_waveforms[c] * 1.0, atol=1e-8
        )

    def test_class_conditional_means_separated(self, small_session):
        _, truth = small_session
        flat = truth.class_waveforms.reshape(9, -1)
        scale = np.linalg.norm(flat, axis=1).mean()
        for i in range(9):
            for j in range(i + 1, 9):
                assert np.linalg.norm(flat[i] - flat[j]) > 0.2 * scale

    def test_clean_signal_energy_in_band(self, small_session):
        session, truth = small_session
        spectrum = np.abs(np.fft.rfft(truth.clean_eeg, axis=1)) ** 2
        freqs = np.fft.rfftfreq(session.n_samples, d=1.0 / 250.0)
        band = (freqs >= 0.5) & (freqs <= 8.0)
        fraction = spectrum[:, band].sum() / spectrum.sum()
        assert fraction >= 0.95

    def test_snr_scaling(self):
        _, truth = gen_session(SynthConfig(n_repetitions=1, snr_db=5.0, seed=9))
        p_sig = np.mean(truth.clean_eeg[:, truth.stroke_mask] ** 2)
        p_noise = np.mean(truth.noise ** 2)
        np.testing.assert_allclose(10 * np.log10(p_sig / p_noise), 5.0, atol=1e-9)

    def test_events_alternate_and_increase(self, small_session):
        session, _ = small_session
        kinds = [e.kind for e in session.events]
        assert kinds[::2] == [PEN_DOWN] * (len(kinds) // 2)
        assert kinds[1::2] == [PEN_UP] * (len(kinds) // 2)

    def test_round_trip_through_files(self, tmp_path, small_session):
        session, _ = small_session
        paths = save_session(tmp_path, session)
        back = load_session(paths["eeg"], paths["events"], paths["kinematics"])
        assert np.array_equal(back.eeg, session.eeg)
        assert np.array_equal(back.kinematics, session.kinematics)
        assert len(back.events) == len(session.events)
        assert all(
            (a.sample_index, a.kind, a.char_class) == (b.sample_index, b.kind, b.char_class)
            for a, b in zip(back.events, session.events)
        )
