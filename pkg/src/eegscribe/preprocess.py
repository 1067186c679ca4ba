"""Preprocessing chain: raw sessions to normalized, fold-assigned epochs.

Fixed stage order (overridable only through an explicit config flag):
average reference -> 1-45 Hz zero-phase band-pass -> ICA artifact
rejection -> 0.5-8 Hz zero-phase band-pass -> pen-down epoching ->
normalization. Filtering is order-4 Butterworth applied forward-backward
(zero phase, effective order 8).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import signal
from sklearn.base import BaseEstimator

from . import stk
from .exceptions import (
    ContractError,
    DecompositionError,
    DimensionError,
    ParameterError,
)
from .session import EpochSet, RawSession
from .validation import EPOCH_SAMPLES, N_CLASSES, SAMPLING_RATE_HZ, check_labels

logger = logging.getLogger(__name__)

DEFAULT_STAGE_ORDER = (
    "average_reference",
    "bandpass_wide",
    "ica_reject",
    "bandpass_narrow",
    "epoch",
    "normalize",
)

N_FOLDS = 5


# -- individual operations ---------------------------------------------------

def average_reference(eeg: np.ndarray) -> np.ndarray:
    """Subtract the instantaneous cross-channel mean from every channel."""
    eeg = np.asarray(eeg, dtype=np.float64)
    if eeg.ndim != 2 or eeg.shape[0] < 2:
        raise ContractError("average reference needs at least 2 channels")
    return eeg - eeg.mean(axis=0, keepdims=True)


def butter_bandpass(
    eeg: np.ndarray,
    low_hz: float,
    high_hz: float,
    order: int = 4,
    fs: float = SAMPLING_RATE_HZ,
) -> np.ndarray:
    """Zero-phase Butterworth band-pass, applied per channel."""
    eeg = np.atleast_2d(np.asarray(eeg, dtype=np.float64))
    nyquist = fs / 2.0
    if not (0.0 < low_hz < high_hz < nyquist):
        raise ParameterError(
            f"cutoffs must satisfy 0 < low < high < {nyquist}, got ({low_hz}, {high_hz})"
        )
    if order < 1:
        raise ParameterError("filter order must be >= 1")
    sos = signal.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")
    # default forward-backward padding length; treat it as the transient scale
    transient = 3 * (2 * sos.shape[0] + 1)
    if eeg.shape[1] < 3 * transient:
        raise ContractError(
            f"signal length {eeg.shape[1]} shorter than 3x filter transient ({transient})"
        )
    return signal.sosfiltfilt(sos, eeg, axis=1)


class FastICAResult(NamedTuple):
    unmixing: np.ndarray   # (n_components, C), rows unit-norm in whitened space
    sources: np.ndarray    # (n_components, S)
    converged: np.ndarray  # (n_components,) bool
    n_iter: np.ndarray     # (n_components,) iterations used


def fast_ica(
    eeg: np.ndarray,
    n_components: int,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> FastICAResult:
    """Deflationary FastICA with the tanh contrast.

    The data is centered and whitened internally; a component that fails to
    converge within ``max_iter`` is reported in ``converged`` and the
    partial result is still returned.
    """
    x = np.asarray(eeg, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected (channels, samples), got {x.shape}")
    n_channels, n_samples = x.shape
    if n_components < 1 or n_components > n_channels:
        raise ParameterError(f"n_components must lie in [1, {n_channels}]")

    xc = x - x.mean(axis=1, keepdims=True)
    cov = xc @ xc.T / n_samples
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    rank = int(np.sum(eigvals > max(eigvals[0], 0.0) * 1e-10))
    if rank < n_components:
        raise DecompositionError(
            f"covariance rank {rank} is below the requested {n_components} components"
        )
    whitener = eigvecs[:, :n_components].T / np.sqrt(eigvals[:n_components])[:, None]
    z = whitener @ xc  # unit covariance

    rng = np.random.default_rng(seed)
    W = np.zeros((n_components, n_components))
    converged = np.zeros(n_components, dtype=bool)
    n_iter = np.zeros(n_components, dtype=np.int64)
    for i in range(n_components):
        w = rng.standard_normal(n_components)
        w /= np.linalg.norm(w)
        for iteration in range(1, max_iter + 1):
            wz = w @ z
            g = np.tanh(wz)
            # E[z g(w.z)] - E[g'(w.z)] w, with g' = 1 - g^2
            w_new = (z @ g) / n_samples - (1.0 - (g @ g) / n_samples) * w
            w_new -= W[:i].T @ (W[:i] @ w_new)  # deflation
            norm = np.linalg.norm(w_new)
            if norm < 1e-12:
                w_new = rng.standard_normal(n_components)
                w_new -= W[:i].T @ (W[:i] @ w_new)
                norm = np.linalg.norm(w_new)
            w_new /= norm
            delta = abs(abs(w_new @ w) - 1.0)
            w = w_new
            if delta < tol:
                converged[i] = True
                break
        n_iter[i] = iteration
        if not converged[i]:
            logger.warning("FastICA component %d did not converge in %d iterations", i, max_iter)
        W[i] = w

    unmixing = W @ whitener
    sources = unmixing @ xc
    return FastICAResult(unmixing=unmixing, sources=sources, converged=converged, n_iter=n_iter)


def reject_eog(
    sources: np.ndarray,
    unmixing: np.ndarray,
    frontal_reference: np.ndarray,
    corr_threshold: float,
) -> np.ndarray:
    """Zero components correlated with the frontal reference; reconstruct.

    Components whose absolute Pearson correlation with the reference
    reaches ``corr_threshold`` are removed; the cleaned signal is rebuilt
    through the pseudo-inverse of the unmixing matrix.
    """
    sources = np.asarray(sources, dtype=np.float64)
    reference = np.asarray(frontal_reference, dtype=np.float64).ravel()
    if sources.shape[1] != reference.shape[0]:
        raise DimensionError("frontal reference must align with the sources in time")
    ref_c = reference - reference.mean()
    ref_norm = np.linalg.norm(ref_c)
    correlations = np.zeros(sources.shape[0])
    if ref_norm > 0:
        src_c = sources - sources.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(src_c, axis=1)
        ok = norms > 0
        correlations[ok] = (src_c[ok] @ ref_c) / (norms[ok] * ref_norm)
    rejected = np.abs(correlations) >= corr_threshold
    if rejected.all():
        raise ContractError(
            "artifact rejection would remove every component; refusing to erase the recording"
        )
    kept = sources.copy()
    kept[rejected] = 0.0
    return np.linalg.pinv(unmixing) @ kept


def extract_epochs(session: RawSession) -> EpochSet:
    """One unnormalized epoch per pen-down: EEG window [t0, t0+250) plus the
    interpolated stroke trajectory. Trials whose window overruns the
    recording are dropped with a warning."""
    epochs, trajectories, labels = [], [], []
    dropped = 0
    downs = session.pen_down_events()
    ups = [e for e in session.events if e.kind == "pen_up"]
    for i, event in enumerate(downs):
        t0 = event.sample_index
        if t0 + EPOCH_SAMPLES > session.n_samples:
            dropped += 1
            logger.warning(
                "dropping trial at sample %d: window exceeds recording length %d",
                t0,
                session.n_samples,
            )
            continue
        t_up = ups[i].sample_index if i < len(ups) else t0 + EPOCH_SAMPLES - 1
        segment = session.kinematics_segment(t0, t_up)
        epochs.append(session.eeg[:, t0:t0 + EPOCH_SAMPLES])
        trajectories.append(normalize_trajectory(segment))
        labels.append(event.char_class)
    n = len(epochs)
    return EpochSet(
        epochs=np.asarray(epochs).reshape(n, session.n_channels, EPOCH_SAMPLES),
        trajectories=np.asarray(trajectories).reshape(n, 4, EPOCH_SAMPLES),
        labels=np.asarray(labels, dtype=np.int64),
        dropped_trials=dropped,
    )


def znorm_channels(epochs: np.ndarray) -> np.ndarray:
    """Per epoch, per channel: subtract mean, divide by population std.

    Channels with std below 1e-12 become zeros.
    """
    epochs = np.asarray(epochs, dtype=np.float64)
    mean = epochs.mean(axis=-1, keepdims=True)
    std = epochs.std(axis=-1, keepdims=True)
    out = np.where(std < 1e-12, 0.0, (epochs - mean) / np.where(std < 1e-12, 1.0, std))
    return out


def normalize_trajectory(segment: np.ndarray) -> np.ndarray:
    """Resample one stroke's kinematics onto 250 uniform points and normalize.

    Steps: linear interpolation of (x, y, pressure, velocity) over the
    segment's own time span; shift x, y so the stroke starts at the origin;
    min-max scale each row to [0, 1] (constant rows become zeros).
    """
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2 or segment.shape[1] != 5:
        raise DimensionError("segment must be rows of (sample_index, x, y, pressure, velocity)")
    if segment.shape[0] < 2:
        raise ContractError("trajectory segment needs at least 2 samples")
    times = segment[:, 0]
    grid = np.linspace(times[0], times[-1], EPOCH_SAMPLES)
    rows = np.stack([np.interp(grid, times, segment[:, k]) for k in range(1, 5)])
    rows[0] -= rows[0, 0]
    rows[1] -= rows[1, 0]
    lo = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - lo
    return np.where(span < 1e-12, 0.0, (rows - lo) / np.where(span < 1e-12, 1.0, span))


@dataclass
class FoldAssignment:
    """Stratified 5-fold assignment: fold_of_trial[i] in [0, 5)."""

    fold_of_trial: np.ndarray

    def __post_init__(self):
        self.fold_of_trial = np.asarray(self.fold_of_trial, dtype=np.int64)

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_trial == fold)

    def fold_lists(self) -> list:
        return [self.indices(k) for k in range(N_FOLDS)]


def make_folds(labels, seed: int = 0) -> FoldAssignment:
    """Deterministic stratified assignment into 5 folds.

    Per-class counts differ by at most 1 across folds; classes with fewer
    than 5 trials are assigned best-effort with a warning.
    """
    labels = check_labels(labels)
    n = labels.shape[0]
    if n < N_FOLDS:
        raise ContractError(f"need at least {N_FOLDS} trials, got {n}")
    rng = np.random.default_rng(seed)
    fold_of_trial = np.full(n, -1, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < N_FOLDS:
            logger.warning("class %d has only %d trials; stratification is best-effort", c, idx.size)
        rng.shuffle(idx)
        for j, trial in enumerate(idx):
            fold_of_trial[trial] = (j + offset) % N_FOLDS
        offset += idx.size
    return FoldAssignment(fold_of_trial=fold_of_trial)


# -- whole-session pipeline ----------------------------------------------------

@dataclass
class PreprocessConfig:
    band_wide: tuple = (1.0, 45.0)
    band_narrow: tuple = (0.5, 8.0)
    filter_order: int = 4
    ica_components: int | None = None  # None: channels - 1 (average-reference rank loss)
    eog_corr_threshold: float = 0.7
    frontal_channel: int = 0
    seed: int = 0
    stage_order: tuple = DEFAULT_STAGE_ORDER
    allow_custom_order: bool = False

    def __post_init__(self):
        self.stage_order = tuple(self.stage_order)
        if set(self.stage_order) != set(DEFAULT_STAGE_ORDER) or len(self.stage_order) != len(
            DEFAULT_STAGE_ORDER
        ):
            raise ParameterError(f"stage_order must be a permutation of {DEFAULT_STAGE_ORDER}")
        if self.stage_order != DEFAULT_STAGE_ORDER and not self.allow_custom_order:
            raise ParameterError(
                "non-canonical stage order requires allow_custom_order=True"
            )


def preprocess_session(
    session: RawSession, config: PreprocessConfig | None = None
) -> tuple[EpochSet, FoldAssignment, dict]:
    """Run the full chain on one session.

    Returns normalized epochs, the stratified fold assignment, and a
    manifest dict recording every parameter and resulting shape.
    """
    config = config or PreprocessConfig()
    state = {"eeg": session.eeg, "session": session, "epochset": None}
    ica_info = {}

    def stage_average_reference():
        state["eeg"] = average_reference(state["eeg"])

    def stage_bandpass_wide():
        state["eeg"] = butter_bandpass(
            state["eeg"], *config.band_wide, order=config.filter_order
        )

    def stage_ica_reject():
        n_comp = config.ica_components
        if n_comp is None:
            # average referencing removes one dimension
            n_comp = state["eeg"].shape[0] - 1
        result = fast_ica(state["eeg"], n_comp, seed=config.seed)
        reference = state["eeg"][config.frontal_channel]
        state["eeg"] = reject_eog(
            result.sources, result.unmixing, reference, config.eog_corr_threshold
        )
        ica_info.update(
            n_components=int(n_comp),
            converged=int(result.converged.sum()),
        )

    def stage_bandpass_narrow():
        state["eeg"] = butter_bandpass(
            state["eeg"], *config.band_narrow, order=config.filter_order
        )

    def stage_epoch():
        cleaned = RawSession(
            eeg=state["eeg"],
            events=state["session"].events,
            kinematics=state["session"].kinematics,
        )
        state["epochset"] = extract_epochs(cleaned)

    def stage_normalize():
        es = state["epochset"]
        if es is None:
            raise ContractError("normalize stage requires epoching to have run first")
        state["epochset"] = EpochSet(
            epochs=znorm_channels(es.epochs),
            trajectories=es.trajectories,  # already normalized at extraction
            labels=es.labels,
            dropped_trials=es.dropped_trials,
        )

    stages = {
        "average_reference": stage_average_reference,
        "bandpass_wide": stage_bandpass_wide,
        "ica_reject": stage_ica_reject,
        "bandpass_narrow": stage_bandpass_narrow,
        "epoch": stage_epoch,
        "normalize": stage_normalize,
    }
    for name in config.stage_order:
        stages[name]()

    epochset = state["epochset"]
    folds = make_folds(epochset.labels, seed=config.seed)
    manifest = {
        "stage_order": list(config.stage_order),
        "band_wide_hz": list(config.band_wide),
        "band_narrow_hz": list(config.band_narrow),
        "filter_order": config.filter_order,
        "ica": ica_info,
        "eog_corr_threshold": config.eog_corr_threshold,
        "frontal_channel": config.frontal_channel,
        "seed": config.seed,
        "n_trials": len(epochset),
        "dropped_trials": epochset.dropped_trials,
        "epochs_shape": list(epochset.epochs.shape),
        "trajectories_shape": list(epochset.trajectories.shape),
        "fold_sizes": [int(folds.indices(k).size) for k in range(N_FOLDS)],
    }
    return epochset, folds, manifest


class SessionPreprocessor(BaseEstimator):
    """Estimator-style wrapper around the preprocessing chain.

    Stateless between calls; ``transform`` maps a RawSession to
    (EpochSet, FoldAssignment, manifest).
    """

    def __init__(
        self,
        band_wide=(1.0, 45.0),
        band_narrow=(0.5, 8.0),
        filter_order=4,
        ica_components=None,
        eog_corr_threshold=0.7,
        frontal_channel=0,
        seed=0,
    ):
        self.band_wide = band_wide
        self.band_narrow = band_narrow
        self.filter_order = filter_order
        self.ica_components = ica_components
        self.eog_corr_threshold = eog_corr_threshold
        self.frontal_channel = frontal_channel
        self.seed = seed

    def _config(self) -> PreprocessConfig:
        return PreprocessConfig(
            band_wide=tuple(self.band_wide),
            band_narrow=tuple(self.band_narrow),
            filter_order=self.filter_order,
            ica_components=self.ica_components,
            eog_corr_threshold=self.eog_corr_threshold,
            frontal_channel=self.frontal_channel,
            seed=self.seed,
        )

    def fit(self, session=None, y=None):
        return self

    def transform(self, session: RawSession):
        return preprocess_session(session, self._config())


# -- fold file storage ---------------------------------------------------------

def save_folds(
    directory, epochset: EpochSet, folds: FoldAssignment, manifest: dict
) -> Path:
    """Write per-fold STK1 files plus the JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(N_FOLDS):
        idx = folds.indices(k)
        stk.write_tensor(directory / f"fold{k}_epochs.stk1", epochset.epochs[idx])
        stk.write_tensor(directory / f"fold{k}_traj.stk1", epochset.trajectories[idx])
        stk.write_tensor(
            directory / f"fold{k}_labels.stk1", epochset.labels[idx].astype(np.float64)
        )
    path = directory / "preprocess_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_folds(directory) -> tuple[list, dict]:
    """Read the five fold triplets back; returns ([(epochs, traj, labels)], manifest)."""
    directory = Path(directory)
    out = []
    for k in range(N_FOLDS):
        epochs = stk.read_tensor(directory / f"fold{k}_epochs.stk1")
        traj = stk.read_tensor(directory / f"fold{k}_traj.stk1")
        labels = stk.read_tensor(directory / f"fold{k}_labels.stk1").astype(np.int64)
        out.append((epochs, traj, labels))
    manifest = json.loads((directory / "preprocess_manifest.json").read_text())
    return out, manifest
