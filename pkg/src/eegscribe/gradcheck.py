"""Central-difference gradient verification.

Report-only: these helpers never raise on mismatch, they return a report
with the max relative error so tests decide the verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _rel_error(analytic, numeric):
    # denominator clamped at 1 so near-zero gradients are judged absolutely
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / denom


def grad_check(fn, inputs, h=1e-5, tol=1e-6) -> GradCheckReport:
    """Compare engine gradients of scalar ``fn(*tensors)`` against central
    differences taken over every element of every input."""
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    loss = fn(*tensors)
    backward(loss)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def evaluate():
        with no_grad():
            return float(fn(*tensors).data)

    per_input = []
    for t, a in zip(tensors, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        per_input.append(float(_rel_error(a, numeric).max()) if a.size else 0.0)
    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_error=worst, per_input=per_input, h=h, tol=tol)


def check_gradient_pair(f, grad_f, x, h=1e-5, tol=1e-6) -> GradCheckReport:
    """Same check for a plain-ndarray function/gradient pair.

    ``f(x) -> float`` and ``grad_f(x) -> ndarray like x``.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    analytic = np.asarray(grad_f(x), dtype=np.float64)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * h)
    worst = float(_rel_error(analytic, numeric).max())
    return GradCheckReport(max_rel_error=worst, per_input=[worst], h=h, tol=tol)
