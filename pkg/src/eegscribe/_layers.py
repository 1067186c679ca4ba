"""Parameter initialization shared by the encoder and classifiers."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def conv_weight(rng, c_out, c_in, k) -> Tensor:
    scale = np.sqrt(2.0 / (c_in * k))
    return Tensor(rng.standard_normal((c_out, c_in, k)) * scale, requires_grad=True)


def dense_weight(rng, n_in, n_out) -> Tensor:
    scale = np.sqrt(2.0 / n_in)
    return Tensor(rng.standard_normal((n_in, n_out)) * scale, requires_grad=True)


def bias(n) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)
