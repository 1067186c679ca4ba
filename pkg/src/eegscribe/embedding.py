"""Contrastive embedding of epoched EEG, conditioned on auxiliary labels.

Follows the CEBRA recipe: an InfoNCE objective over a temporal-offset
sampler. A positive for an anchor time point is drawn within 10 frames in
the same trial (which shares the anchor's discrete label); negatives are
drawn uniformly over all time points. The encoder maps the causal
10-sample window ending at each time point onto the unit sphere in
``d_embed`` dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import _layers, stk
from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, DimensionError, ParameterError, TrainingError
from .optim import Adam
from .validation import EPOCH_SAMPLES, check_epochs, check_labels, check_seed

SUPPORTED_D_EMBED = (2, 4, 8, 12, 16)


@dataclass
class CebraConfig:
    d_embed: int = 16
    batch_size: int = 1024
    lr: float = 0.0002
    offset_frames: int = 10
    temperature: float = 1.0
    steps: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.d_embed < 1:
            raise ParameterError("d_embed must be positive")
        if not 0 < self.offset_frames < EPOCH_SAMPLES:
            raise ParameterError(f"offset_frames must lie in (0, {EPOCH_SAMPLES})")
        if self.temperature <= 0:
            raise ParameterError("temperature must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ParameterError("batch_size must be >= 1 and steps >= 0")


@dataclass
class AuxiliaryVariables:
    """Flattened per-time-point conditioning variables.

    ``continuous`` holds (x, y, pressure, velocity) rows and ``discrete``
    the trial's class label, both over N = n_trials * 250 points in
    trial-major order.
    """

    continuous: np.ndarray
    discrete: np.ndarray
    n_trials: int
    epoch_len: int = EPOCH_SAMPLES

    def __post_init__(self):
        self.continuous = np.asarray(self.continuous, dtype=np.float64)
        self.discrete = check_labels(self.discrete, name="discrete labels")
        n_points = self.n_trials * self.epoch_len
        if self.continuous.shape != (n_points, 4):
            raise DimensionError(
                f"continuous must be ({n_points}, 4), got {self.continuous.shape}"
            )
        if self.discrete.shape[0] != n_points:
            raise DimensionError("discrete labels must cover every time point")
        if not np.all(np.isfinite(self.continuous)):
            raise ParameterError("continuous variables must be finite")

    @property
    def n_points(self) -> int:
        return self.n_trials * self.epoch_len

    @classmethod
    def from_trials(cls, labels, trajectories=None, epoch_len=EPOCH_SAMPLES):
        labels = check_labels(labels)
        n = labels.shape[0]
        if trajectories is None:
            continuous = np.zeros((n * epoch_len, 4))
        else:
            trajectories = np.asarray(trajectories, dtype=np.float64)
            if trajectories.shape != (n, 4, epoch_len):
                raise DimensionError(
                    f"trajectories must be ({n}, 4, {epoch_len}), got {trajectories.shape}"
                )
            continuous = trajectories.transpose(0, 2, 1).reshape(n * epoch_len, 4)
        return cls(
            continuous=continuous,
            discrete=np.repeat(labels, epoch_len),
            n_trials=n,
            epoch_len=epoch_len,
        )


class ContrastiveEncoder:
    """Three valid temporal convolutions (k=3) over the 10-sample window,
    a dense head, and L2 normalization onto the unit sphere."""

    def __init__(self, n_channels, d_embed, window, seed):
        if window != 10:
            # conv stack (10 -> 8 -> 6 -> 4) is laid out for the 10-frame window
            raise ParameterError("encoder expects a 10-sample receptive window")
        self.n_channels = n_channels
        self.d_embed = d_embed
        self.window = window
        self.seed = seed
        rng = np.random.default_rng([check_seed(seed), 0])
        hidden = 32
        self.conv1_w = _layers.conv_weight(rng, hidden, n_channels, 3)
        self.conv1_b = _layers.bias(hidden)
        self.conv2_w = _layers.conv_weight(rng, hidden, hidden, 3)
        self.conv2_b = _layers.bias(hidden)
        self.conv3_w = _layers.conv_weight(rng, d_embed, hidden, 3)
        self.conv3_b = _layers.bias(d_embed)
        self.head_w = _layers.dense_weight(rng, 4 * d_embed, d_embed)
        self.head_b = _layers.bias(d_embed)

    def parameters(self):
        return [
            self.conv1_w, self.conv1_b,
            self.conv2_w, self.conv2_b,
            self.conv3_w, self.conv3_b,
            self.head_w, self.head_b,
        ]

    def forward(self, windows: Tensor) -> Tensor:
        """windows: (B, C, 10) -> unit-norm embeddings (B, d_embed)."""
        h = ad.relu(ad.conv1d(windows, self.conv1_w, self.conv1_b))
        h = ad.relu(ad.conv1d(h, self.conv2_w, self.conv2_b))
        h = ad.conv1d(h, self.conv3_w, self.conv3_b)
        h = ad.reshape(h, (h.shape[0], 4 * self.d_embed))
        h = ad.dense(h, self.head_w, self.head_b)
        return ad.normalize_rows(h)

    def encode(self, windows: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(Tensor(windows)).data


def build_encoder(config: CebraConfig, n_channels=32) -> ContrastiveEncoder:
    return ContrastiveEncoder(
        n_channels=n_channels,
        d_embed=config.d_embed,
        window=config.offset_frames,
        seed=config.seed,
    )


class ContrastiveBatch(NamedTuple):
    anchors: np.ndarray    # (B,)
    positives: np.ndarray  # (B,)
    negatives: np.ndarray  # (B, B_neg)
    shared_negatives: bool


def sample_contrastive_batch(
    aux: AuxiliaryVariables,
    config: CebraConfig,
    rng,
    shared_negatives: bool = True,
    max_retries: int = 50,
) -> ContrastiveBatch:
    """Draw anchors, within-offset same-label positives, and negatives.

    Positives are uniform over time points at most ``offset_frames`` away
    from the anchor within the same trial (the anchor itself is excluded);
    negatives are uniform over all points, label-agnostic and, by default,
    shared across the batch (the returned (B, B_neg) array then holds B
    identical rows without copying).
    """
    N = aux.n_points
    B = config.batch_size
    if B > N:
        raise ContractError(f"batch_size {B} exceeds the {N} available time points")
    offset = config.offset_frames
    epoch_len = aux.epoch_len

    anchors = rng.integers(0, N, size=B)
    positives = np.empty(B, dtype=np.int64)
    pending = np.arange(B)
    for _ in range(max_retries):
        t = anchors[pending] % epoch_len
        lo = np.maximum(t - offset, 0)
        hi = np.minimum(t + offset, epoch_len - 1)
        n_candidates = hi - lo  # excludes the anchor itself
        ok = n_candidates > 0
        if ok.any():
            sel = pending[ok]
            draw = (rng.integers(0, n_candidates[ok])).astype(np.int64)
            rel = lo[ok] + draw + (draw >= (t[ok] - lo[ok]))  # skip the anchor slot
            positives[sel] = anchors[sel] - t[ok] + rel
        pending = pending[~ok]
        if pending.size == 0:
            break
        anchors[pending] = rng.integers(0, N, size=pending.size)
    else:
        raise ContractError("could not find positives for some anchors (degenerate trials)")

    same_label = aux.discrete[anchors] == aux.discrete[positives]
    if not same_label.all():
        raise ContractError("positive sampling crossed a label boundary")

    if shared_negatives:
        shared = rng.integers(0, N, size=B)
        negatives = np.broadcast_to(shared, (B, B))
    else:
        negatives = rng.integers(0, N, size=(B, B))
    return ContrastiveBatch(anchors, positives, negatives, shared_negatives)


def infonce_loss(anchors, positives, negatives, temperature=1.0):
    """InfoNCE with dot-product similarity.

    anchors, positives: Tensor (B, d); negatives: Tensor (B_neg, d) for a
    batch-shared negative set or (B, B_neg, d) for per-anchor negatives.
    """
    if temperature <= 0:
        raise ParameterError("temperature must be > 0")
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise DimensionError(
            f"anchors/positives must share shape (B, d), got {anchors.shape} vs {positives.shape}"
        )
    B = anchors.shape[0]
    pos_scores = ad.tensor_sum(ad.mul(anchors, positives), axis=1, keepdims=True)
    if negatives.ndim == 2:
        neg_scores = ad.matmul(anchors, ad.transpose(negatives))
    elif negatives.ndim == 3:
        if negatives.shape[0] != B:
            raise DimensionError("per-anchor negatives must have leading batch size B")
        neg_scores = ad.pairwise_scores(anchors, negatives)
    else:
        raise DimensionError("negatives must be (B_neg, d) or (B, B_neg, d)")
    scores = ad.concat([pos_scores, neg_scores], axis=1)
    scores = ad.mul(scores, 1.0 / temperature)
    log_partition = ad.logsumexp(scores, axis=1)
    pos = ad.mul(ad.reshape(pos_scores, (B,)), 1.0 / temperature)
    return ad.tensor_mean(ad.sub(log_partition, pos))


def _causal_window_view(epochs: np.ndarray, window: int) -> np.ndarray:
    """(n, C, T) -> view (n, C, T, window); window t covers samples
    [t - window + 1, t], left edge padded by repeating the first sample."""
    pad = np.repeat(epochs[:, :, :1], window - 1, axis=2)
    padded = np.concatenate([pad, epochs], axis=2)
    return sliding_window_view(padded, window, axis=2)


def _gather_windows(view, flat_idx, epoch_len):
    trials = flat_idx // epoch_len
    times = flat_idx % epoch_len
    return view[trials, :, times, :]


def train_cebra(
    epochs: np.ndarray, aux: AuxiliaryVariables, config: CebraConfig
) -> tuple[ContrastiveEncoder, np.ndarray]:
    """Optimize the encoder with Adam; returns it with the per-step loss curve.

    Deterministic under ``config.seed``. Raises TrainingError carrying the
    last finite step when the loss degenerates.
    """
    epochs = check_epochs(epochs)
    n, n_channels, T = epochs.shape
    if aux.n_trials != n or aux.epoch_len != T:
        raise DimensionError(
            f"auxiliary variables cover {aux.n_trials}x{aux.epoch_len}, data is {n}x{T}"
        )
    encoder = build_encoder(config, n_channels=n_channels)
    if config.steps == 0:
        return encoder, np.zeros(0)

    rng = np.random.default_rng([check_seed(config.seed), 1])
    optimizer = Adam(encoder.parameters(), lr=config.lr)
    view = _causal_window_view(epochs, config.offset_frames)
    losses = np.zeros(config.steps)
    for step in range(config.steps):
        batch = sample_contrastive_batch(aux, config, rng)
        za = encoder.forward(Tensor(_gather_windows(view, batch.anchors, T)))
        zp = encoder.forward(Tensor(_gather_windows(view, batch.positives, T)))
        if batch.shared_negatives:
            zn = encoder.forward(Tensor(_gather_windows(view, batch.negatives[0], T)))
        else:
            flat = batch.negatives.reshape(-1)
            uniq, inverse = np.unique(flat, return_inverse=True)
            zu = encoder.forward(Tensor(_gather_windows(view, uniq, T)))
            zn = ad.reshape(
                ad.take_rows(zu, inverse), (*batch.negatives.shape, config.d_embed)
            )
        loss = infonce_loss(za, zp, zn, temperature=config.temperature)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"contrastive loss became non-finite at step {step}",
                last_step=step - 1,
                history=losses[:step].copy(),
            )
        losses[step] = value
        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()
    return encoder, losses


@dataclass
class EmbeddingMatrix:
    """Time-resolved embeddings: (N, d_embed) with unit-norm rows, plus the
    trial-major view used by the fusion classifier."""

    values: np.ndarray
    n_trials: int
    epoch_len: int = EPOCH_SAMPLES

    @property
    def trials(self) -> np.ndarray:
        """(n_trials, d_embed, epoch_len) view of the same embeddings."""
        d = self.values.shape[1]
        return self.values.reshape(self.n_trials, self.epoch_len, d).transpose(0, 2, 1)


def encode_dataset(
    encoder: ContrastiveEncoder, epochs: np.ndarray, chunk_size: int = 8192
) -> EmbeddingMatrix:
    """Embed every time point of every trial (causal windows, batched)."""
    epochs = check_epochs(epochs)
    n, _, T = epochs.shape
    view = _causal_window_view(epochs, encoder.window)
    N = n * T
    values = np.empty((N, encoder.d_embed))
    for start in range(0, N, chunk_size):
        idx = np.arange(start, min(start + chunk_size, N))
        values[idx] = encoder.encode(_gather_windows(view, idx, T))
    return EmbeddingMatrix(values=values, n_trials=n, epoch_len=T)


# -- serialization ---------------------------------------------------------

_PARAM_NAMES = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "conv3_w", "conv3_b", "head_w", "head_b",
)


def save_encoder(directory, encoder: ContrastiveEncoder, config: CebraConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "contrastive_encoder",
        "n_channels": encoder.n_channels,
        "d_embed": encoder.d_embed,
        "window": encoder.window,
        "seed": encoder.seed,
        "config": asdict(config),
        "params": {
            name: list(getattr(encoder, name).shape) for name in _PARAM_NAMES
        },
    }
    for name in _PARAM_NAMES:
        stk.write_tensor(directory / f"{name}.stk1", getattr(encoder, name).data)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_encoder(directory) -> tuple[ContrastiveEncoder, CebraConfig]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = CebraConfig(**manifest["config"])
    encoder = ContrastiveEncoder(
        n_channels=manifest["n_channels"],
        d_embed=manifest["d_embed"],
        window=manifest["window"],
        seed=manifest["seed"],
    )
    for name in _PARAM_NAMES:
        tensor = getattr(encoder, name)
        loaded = stk.read_tensor(directory / f"{name}.stk1")
        if loaded.shape != tensor.data.shape:
            raise DimensionError(
                f"checkpoint parameter {name} has shape {loaded.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = loaded
    return encoder, config


class ContrastiveEmbedding(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit on (epochs, per-trial labels), transform to
    per-time-point embeddings (n_trials*250, d_embed)."""

    def __init__(
        self,
        d_embed=16,
        batch_size=1024,
        lr=0.0002,
        offset_frames=10,
        temperature=1.0,
        steps=5000,
        seed=0,
    ):
        self.d_embed = d_embed
        self.batch_size = batch_size
        self.lr = lr
        self.offset_frames = offset_frames
        self.temperature = temperature
        self.steps = steps
        self.seed = seed

    def _config(self) -> CebraConfig:
        return CebraConfig(
            d_embed=self.d_embed,
            batch_size=self.batch_size,
            lr=self.lr,
            offset_frames=self.offset_frames,
            temperature=self.temperature,
            steps=self.steps,
            seed=self.seed,
        )

    def fit(self, X, y, trajectories=None):
        X = check_epochs(X)
        aux = AuxiliaryVariables.from_trials(
            check_labels(y, n=X.shape[0]), trajectories, epoch_len=X.shape[2]
        )
        self.encoder_, self.loss_curve_ = train_cebra(X, aux, self._config())
        return self

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("ContrastiveEmbedding must be fitted before transform")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return encode_dataset(self.encoder_, check_epochs(X)).values

    def transform_trials(self, X) -> np.ndarray:
        """Trial-major embeddings (n, d_embed, 250) for the fusion classifier."""
        self._check_fitted()
        return encode_dataset(self.encoder_, check_epochs(X)).trials
