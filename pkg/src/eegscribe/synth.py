"""Deterministic synthetic recording sessions.

Sessions mimic the target geometry: 32 EEG channels at 250 Hz, pen events
for repeated "HELLO, WORLD!" writing (12 strokes per repetition), and a
parallel kinematics stream. Class-specific activity is band-limited to
0.5-8 Hz so the narrowband stage of the preprocessing chain preserves it;
background noise is 1/f; one blink-like artifact source with a known,
frontal-heavy mixing column makes artifact rejection quantitatively
checkable against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError
from .session import PEN_DOWN, PEN_UP, PHRASE_CLASSES, PenEvent, RawSession
from .validation import EPOCH_SAMPLES, N_CHANNELS, N_CLASSES, SAMPLING_RATE_HZ


@dataclass
class SynthConfig:
    n_repetitions: int = 25
    snr_db: float = 5.0
    seed: int = 0
    class_signal_band: tuple = (0.5, 8.0)
    amplitude_uv: float = 20.0
    gap_samples: int = 125
    n_latent_sources: int = 6
    kin_jitter: float = 0.02
    blink_amplitude: float = 10.0  # relative to amplitude_uv; 0 disables blinks
    blink_mean_interval_s: float = 4.0

    def __post_init__(self):
        if self.n_repetitions < 1:
            raise ParameterError("n_repetitions must be >= 1")
        if not np.isfinite(self.snr_db) and not np.isposinf(self.snr_db):
            raise ParameterError("snr_db must be finite or +inf (noise disabled)")


@dataclass
class CharacterTemplate:
    char_class: int
    stroke: np.ndarray          # (m, 2) polyline vertices
    pressure_base: float
    pressure_sway: float
    speed_sway: float
    speed_phase: float

    def __post_init__(self):
        self.stroke = np.asarray(self.stroke, dtype=np.float64)
        if self.stroke.shape[0] < 2:
            raise ParameterError("stroke needs at least 2 vertices")


def _circle(n=12, r=0.5, cx=0.5, cy=0.5):
    angles = np.linspace(0.5 * np.pi, 2.5 * np.pi, n + 1)
    return np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)


_STROKES = {
    0: [(0, 0), (0, 1), (0, 0.5), (1, 0.5), (1, 1), (1, 0)],                   # H
    1: [(1, 1), (0, 1), (0, 0.5), (0.7, 0.5), (0, 0.5), (0, 0), (1, 0)],       # E
    2: [(0, 1), (0, 0), (0.8, 0)],                                             # L
    3: _circle(),                                                              # O
    4: [(0.5, 0.2), (0.45, 0.0), (0.3, -0.2)],                                 # comma
    5: [(0, 1), (0.25, 0), (0.5, 0.7), (0.75, 0), (1, 1)],                     # W
    6: [(0, 0), (0, 1), (0.6, 1), (0.7, 0.8), (0.6, 0.6), (0, 0.6), (0.7, 0)], # R
    7: [(0, 0), (0, 1), (0.5, 0.95), (0.85, 0.5), (0.5, 0.05), (0, 0)],        # D
    8: [(0.5, 1), (0.5, 0.3), (0.52, 0.18), (0.48, 0.1), (0.5, 0.05)],         # !
}

CHAR_TEMPLATES = {
    c: CharacterTemplate(
        char_class=c,
        stroke=np.asarray(_STROKES[c], dtype=np.float64),
        pressure_base=0.55 + 0.04 * c,
        pressure_sway=0.25,
        speed_sway=0.4,
        speed_phase=2.0 * np.pi * c / N_CLASSES,
    )
    for c in range(N_CLASSES)
}


def gen_character_trajectory(template: CharacterTemplate, jitter: float, rng) -> np.ndarray:
    """One 1-second stroke at 250 Hz: rows (x, y, pressure, velocity).

    The polyline is traversed at the template's speed profile; positional
    jitter is Gaussian. The velocity row is the numerical derivative of the
    (possibly jittered) position magnitude.
    """
    if jitter < 0:
        raise ParameterError("jitter must be >= 0")
    n = EPOCH_SAMPLES
    tau = np.linspace(0.0, 1.0, n)
    speed = 1.0 + template.speed_sway * np.sin(2.0 * np.pi * tau + template.speed_phase)
    arc = np.concatenate([[0.0], np.cumsum(speed[:-1])])
    arc = arc / arc[-1]

    seg = np.linalg.norm(np.diff(template.stroke, axis=0), axis=1)
    knots = np.concatenate([[0.0], np.cumsum(seg)])
    knots = knots / knots[-1]
    x = np.interp(arc, knots, template.stroke[:, 0])
    y = np.interp(arc, knots, template.stroke[:, 1])
    x = x + rng.normal(0.0, jitter, n)
    y = y + rng.normal(0.0, jitter, n)

    pressure = template.pressure_base + template.pressure_sway * np.sin(np.pi * tau)
    dt = 1.0 / SAMPLING_RATE_HZ
    velocity = np.hypot(np.gradient(x, dt), np.gradient(y, dt))
    return np.stack([x, y, pressure, velocity])


@dataclass
class SynthTruth:
    """Ground truth for oracle tests: the generative factors of a session."""

    mixing: np.ndarray            # (32, L)
    class_waveforms: np.ndarray   # (9, L, 250)
    clean_eeg: np.ndarray         # (32, S) class signal only
    blink_trace: np.ndarray       # (S,)
    blink_column: np.ndarray      # (32,)
    noise: np.ndarray             # (32, S)
    stroke_mask: np.ndarray = field(repr=False, default=None)  # (S,) bool


def _one_over_f_noise(rng, n_channels, n_samples):
    white = rng.standard_normal((n_channels, n_samples))
    spectrum = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / SAMPLING_RATE_HZ)
    shaping = 1.0 / np.sqrt(np.maximum(freqs, 1.0))
    return np.fft.irfft(spectrum * shaping[None, :], n=n_samples, axis=1)


def _tukey_taper(n, alpha=0.2):
    # soft on/off ramp so stroke gating leaks little energy out of band
    window = np.ones(n)
    edge = int(alpha * (n - 1) / 2.0)
    if edge > 0:
        ramp = 0.5 * (1.0 + np.cos(np.pi * (np.arange(edge + 1) / edge - 1.0)))
        window[: edge + 1] = ramp
        window[-(edge + 1):] = ramp[::-1]
    return window


def gen_session(config: SynthConfig) -> tuple[RawSession, SynthTruth]:
    """Generate one deterministic session and its ground truth."""
    rng = np.random.default_rng(config.seed)
    n_events = config.n_repetitions * len(PHRASE_CLASSES)
    stride = EPOCH_SAMPLES + config.gap_samples
    lead = EPOCH_SAMPLES
    n_samples = lead + n_events * stride + EPOCH_SAMPLES

    L = config.n_latent_sources
    low, high = config.class_signal_band
    f_lo, f_hi = low + 1.0, high - 1.5  # margins keep leakage inside the band
    taper = _tukey_taper(EPOCH_SAMPLES)
    t = np.arange(EPOCH_SAMPLES) / SAMPLING_RATE_HZ
    waveforms = np.zeros((N_CLASSES, L, EPOCH_SAMPLES))
    for c in range(N_CLASSES):
        for s in range(L):
            for _ in range(3):
                freq = rng.uniform(f_lo, f_hi)
                amp = rng.uniform(0.5, 1.5)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                waveforms[c, s] += amp * np.sin(2.0 * np.pi * freq * t + phase)
            waveforms[c, s] *= taper

    mixing = rng.standard_normal((N_CHANNELS, L))

    clean = np.zeros((N_CHANNELS, n_samples))
    stroke_mask = np.zeros(n_samples, dtype=bool)
    events = []
    onsets = []
    for i in range(n_events):
        t0 = lead + i * stride
        char_class = PHRASE_CLASSES[i % len(PHRASE_CLASSES)]
        clean[:, t0:t0 + EPOCH_SAMPLES] += mixing @ waveforms[char_class]
        stroke_mask[t0:t0 + EPOCH_SAMPLES] = True
        events.append(PenEvent(t0, PEN_DOWN, char_class))
        events.append(PenEvent(t0 + EPOCH_SAMPLES - 1, PEN_UP, char_class))
        onsets.append((t0, char_class))

    # scale so the stroke-region class signal sits at amplitude_uv RMS
    rms = np.sqrt(np.mean(clean[:, stroke_mask] ** 2))
    gain = config.amplitude_uv / rms
    clean *= gain
    mixing *= gain

    if np.isposinf(config.snr_db):
        noise = np.zeros_like(clean)
    else:
        noise = _one_over_f_noise(rng, N_CHANNELS, n_samples)
        p_signal = np.mean(clean[:, stroke_mask] ** 2)
        p_noise = np.mean(noise ** 2)
        noise *= np.sqrt(p_signal / (p_noise * 10.0 ** (config.snr_db / 10.0)))

    blink_trace = np.zeros(n_samples)
    blink_column = np.exp(-np.arange(N_CHANNELS) / 1.5)
    if config.blink_amplitude > 0:
        width = int(0.35 * SAMPLING_RATE_HZ)
        pulse = np.sin(np.pi * np.arange(width) / (width - 1)) ** 2
        n_blinks = max(1, int(n_samples / SAMPLING_RATE_HZ / config.blink_mean_interval_s))
        starts = np.sort(rng.uniform(0, n_samples - width, n_blinks).astype(int))
        for s in starts:
            blink_trace[s:s + width] += pulse
        blink_trace *= config.blink_amplitude * config.amplitude_uv

    eeg = clean + noise + blink_column[:, None] * blink_trace[None, :]

    kinematics = np.zeros((n_samples, 5))
    kinematics[:, 0] = np.arange(n_samples)
    pen_x, pen_y = 0.0, 0.0
    cursor = 0
    for i, (t0, char_class) in enumerate(onsets):
        kinematics[cursor:t0, 1] = pen_x
        kinematics[cursor:t0, 2] = pen_y
        stroke = gen_character_trajectory(
            CHAR_TEMPLATES[char_class], config.kin_jitter, rng
        )
        col = i % len(PHRASE_CLASSES)
        offset_x = 5.0 + 1.2 * col
        offset_y = 7.0
        seg = kinematics[t0:t0 + EPOCH_SAMPLES]
        seg[:, 1] = stroke[0] + offset_x
        seg[:, 2] = stroke[1] + offset_y
        seg[:, 3] = stroke[2]
        seg[:, 4] = stroke[3]
        pen_x, pen_y = seg[-1, 1], seg[-1, 2]
        cursor = t0 + EPOCH_SAMPLES
    kinematics[cursor:, 1] = pen_x
    kinematics[cursor:, 2] = pen_y

    session = RawSession(eeg=eeg, events=events, kinematics=kinematics)
    truth = SynthTruth(
        mixing=mixing,
        class_waveforms=waveforms,
        clean_eeg=clean,
        blink_trace=blink_trace,
        blink_column=blink_column,
        noise=noise,
        stroke_mask=stroke_mask,
    )
    return session, truth
