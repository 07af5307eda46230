"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def numerical_gradient(
    fn: Callable[[], Tensor],
    x: Tensor,
    step: float = 1e-6,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x``.

    ``x.data`` is perturbed in place and restored. With ``indices`` only those
    entries are evaluated and a flat array in the same order is returned.
    """
    data = x.data
    if not data.flags.writeable:
        data = data.copy()
        x.data = data
    idx_list = list(np.ndindex(data.shape)) if indices is None else list(indices)
    out = np.empty(len(idx_list))
    for n, idx in enumerate(idx_list):
        orig = data[idx]
        data[idx] = orig + step
        fp = fn().item()
        data[idx] = orig - step
        fm = fn().item()
        data[idx] = orig
        out[n] = (fp - fm) / (2.0 * step)
    return out.reshape(data.shape) if indices is None else out


def analytic_gradient(fn: Callable[[], Tensor], sources: Sequence[Tensor]) -> list[np.ndarray]:
    with GradTape() as tape:
        y = fn()
    return tape.gradient(y, sources)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    sources: Sequence[Tensor],
    step: float = 1e-6,
) -> float:
    """Worst relative error over all entries of all ``sources``."""
    grads = analytic_gradient(fn, sources)
    worst = 0.0
    for src, g in zip(sources, grads):
        worst = max(worst, relative_error(g, numerical_gradient(fn, src, step)))
    return worst
