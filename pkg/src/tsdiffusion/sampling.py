"""Ancestral sampling: unconditional, reconstruction-guided and replace-based.

Conditional sampling keeps two random streams: the main stream feeds the
initial noise, every posterior draw and every replacement draw, while the
guidance stream feeds the candidate draws used inside gradient updates. With
guidance switched off the main stream is consumed exactly as in replace-only
sampling, so the two modes coincide draw for draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .rng import stream
from .schedule import NoiseSchedule, posterior_mean, respace, reverse_step
from .tensor import GradTape, Tensor

__all__ = [
    "ConditionSpec",
    "SampleRequest",
    "default_grad_steps",
    "budgeted_grad_steps",
    "sample_unconditional",
    "sample_chunk",
    "guidance_gradient",
    "guided_x0",
    "replace_observed",
    "sample_conditional",
    "run_request",
    "RespacedModel",
    "respaced",
]


def default_grad_steps(T: int) -> np.ndarray:
    """Gradient updates per step: 3 in the top third of ``t``, 2 in the middle, 1 below.

    Index 0 is unused; ``K[t]`` for ``t = 1..T``.
    """
    t = np.arange(T + 1)
    k = np.where(t > 2 * T / 3, 3, np.where(t > T / 3, 2, 1))
    k[0] = 0
    return k


def budgeted_grad_steps(k: np.ndarray, budget: int | None) -> np.ndarray:
    """Truncate ``K`` so the total from ``t = T`` downward never exceeds ``budget``."""
    k = np.asarray(k, dtype=np.int64).copy()
    if budget is None:
        return k
    remaining = int(budget)
    for t in range(len(k) - 1, 0, -1):
        k[t] = min(k[t], remaining)
        remaining -= k[t]
    return k


@dataclass
class ConditionSpec:
    """Observed coordinates and guidance settings.

    ``mask`` is ``True`` where observed; ``x_a`` carries the observed values
    (entries off the mask are ignored and zeroed). Both are ``(n, tau, d)`` or
    a single ``(tau, d)`` window shared by all samples. ``grad_steps`` is the
    per-step update count ``K[t]`` (index 0 unused) and ``budget`` caps the
    total number of gradient updates over the trajectory. ``eta=None``
    selects ``1e-2 * tau * d``.
    """

    mask: np.ndarray
    x_a: np.ndarray
    eta: float | None = None
    gamma: float = 0.05
    grad_steps: np.ndarray | None = None
    budget: int | None = 200

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        x_a = np.asarray(self.x_a, dtype=np.float64)
        if x_a.shape != self.mask.shape:
            raise ValueError(f"x_a shape {x_a.shape} does not match mask shape {self.mask.shape}")
        if not np.isfinite(x_a[self.mask]).all():
            raise ValueError("x_a must be finite on observed coordinates")
        self.x_a = np.where(self.mask, x_a, 0.0)
        if self.mask.ndim < 2:
            raise ValueError("mask must be (tau, d) or (n, tau, d)")
        if self.eta is None:
            self.eta = 1e-2 * self.mask.shape[-2] * self.mask.shape[-1]
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")

    def steps_for(self, T: int) -> np.ndarray:
        k = default_grad_steps(T) if self.grad_steps is None else np.asarray(self.grad_steps)
        if len(k) != T + 1:
            raise ValueError(f"grad_steps must have length T + 1 = {T + 1}")
        return budgeted_grad_steps(k, self.budget)


@dataclass
class SampleRequest:
    n_samples: int
    seed: int = 0
    condition: ConditionSpec | None = None
    mode: str = "unconditional"
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in ("unconditional", "guided", "replace-only"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode != "unconditional" and self.condition is None:
            raise ValueError(f"{self.mode} sampling requires a condition")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


class RespacedModel:
    """Denoiser seen through a respaced chain: step ``i`` maps to ``steps[i]``."""

    def __init__(self, model, steps: np.ndarray):
        self.model = model
        self.steps = np.asarray(steps)
        self.cfg = model.cfg

    def x0(self, xt, t):
        return self.model.x0(xt, self.steps[np.asarray(t)])


def respaced(model, sched: NoiseSchedule, inference_steps: int | None):
    """``(model, sched)`` for a reverse chain of ``inference_steps`` steps; ``None`` keeps the full chain."""
    if inference_steps is None or inference_steps == sched.T:
        return model, sched
    short, steps = respace(sched, inference_steps)
    return RespacedModel(model, steps), short


def _window_shape(model) -> tuple[int, int]:
    return model.cfg.seq_len, model.cfg.n_channels


def _x0(model, x: np.ndarray, t: int, clip: tuple[float, float] | None = None) -> np.ndarray:
    x0hat = model.x0(Tensor(x), np.full(len(x), t)).data
    if clip is None:
        return x0hat
    lo, hi = model.cfg.encode(np.asarray(clip, dtype=np.float64))
    return np.clip(x0hat, lo, hi)


def _check_clip(clip) -> tuple[float, float] | None:
    if clip is None:
        return None
    lo, hi = (float(v) for v in clip)
    if not lo < hi:
        raise ValueError(f"clip range must satisfy lo < hi, got {clip!r}")
    return lo, hi


def sample_unconditional(
    model,
    sched: NoiseSchedule,
    n: int,
    seed: int,
    chunk_size: int = 512,
    clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Draw ``n`` windows by running the reverse chain from pure noise.

    Chunk ``i`` of ``chunk_size`` samples uses its own sub-stream of ``seed``,
    so chunks can be produced independently. ``clip``, given in data units,
    bounds every clean-window estimate before it enters the posterior.
    Results are returned in data units.
    """
    out = [
        sample_chunk(model, sched, min(chunk_size, n - start), seed, ci, clip)
        for ci, start in enumerate(range(0, n, chunk_size))
    ]
    return np.concatenate(out, axis=0)


def sample_chunk(
    model,
    sched: NoiseSchedule,
    n: int,
    seed: int,
    index: int,
    clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Chunk ``index`` of :func:`sample_unconditional`; usable from worker processes."""
    clip = _check_clip(clip)
    tau, d = _window_shape(model)
    rng = stream(seed, "sample", index)
    x = rng.standard_normal((n, tau, d))
    for t in range(sched.T, 0, -1):
        x0hat = _x0(model, x, t, clip)
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = reverse_step(x0hat, x, t, z, sched)
    return model.cfg.decode(x)


def guidance_gradient(
    model, xt: np.ndarray, t: int, cond: ConditionSpec, sched: NoiseSchedule, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. ``x_t`` of ``L1 + gamma * L2`` and the plain estimate.

    Works in the space the chain diffuses in: ``cond.x_a`` must already be
    encoded with ``model.cfg.encode``.

    ``L1 = ||x_a - x0hat_a||^2`` on observed coordinates. ``L2 =
    ||x_{t-1} - mu||^2 / post_var_t`` where ``x_{t-1} = mu + sqrt(post_var_t) z``
    is a fixed candidate draw and ``mu`` the posterior mean from ``x0hat``;
    ``L2`` is dropped at ``t = 1`` where the posterior is a point mass.
    """
    x = Tensor(xt, requires_grad=True)
    mask = Tensor(cond.mask.astype(np.float64))
    with GradTape() as tape:
        x0hat = model.x0(x, np.full(len(xt), t))
        loss = tn.tsum(tn.square((x0hat - Tensor(cond.x_a)) * mask))
        var = sched.post_var[t]
        if cond.gamma > 0 and var > 0:
            mu = posterior_mean(x0hat, x, t, sched)
            cand = Tensor(mu.data + np.sqrt(var) * z)
            loss = loss + tn.tsum(tn.square(cand - mu)) * (cond.gamma / var)
    (grad,) = tape.gradient(loss, [x])
    return grad, x0hat.data


def guided_x0(
    xt: np.ndarray, t: int, cond: ConditionSpec, model, sched: NoiseSchedule, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-pass guided estimate ``x0hat - eta * grad``; returns ``(x0tilde, x0hat)``.

    The update descends ``L1 + gamma * L2``, i.e. moves the estimate toward
    the observations and toward high posterior likelihood.
    """
    if cond.eta == 0:
        x0hat = _x0(model, xt, t)
        return x0hat, x0hat
    grad, x0hat = guidance_gradient(model, xt, t, cond, sched, z)
    return x0hat - cond.eta * grad, x0hat


def replace_observed(
    x_a: np.ndarray, mask: np.ndarray, x_prev: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Overwrite observed coordinates of ``x_{t-1}`` with forward samples of ``x_a``.

    The noise level is that of step ``t - 1``; at ``t = 1`` the observed
    coordinates become ``x_a`` exactly.
    """
    t = int(sched.check_step(t))
    mask = np.asarray(mask, dtype=bool)
    x_a = np.asarray(x_a, dtype=np.float64)
    if x_a.shape != mask.shape:
        raise ValueError("x_a and mask shapes differ")
    abar = sched.alpha_bar[t - 1]
    noisy = np.sqrt(abar) * x_a + np.sqrt(1.0 - abar) * eps
    return np.where(mask, noisy, x_prev)


def _broadcast_condition(cond: ConditionSpec, n: int | None) -> tuple[ConditionSpec, int]:
    if cond.mask.ndim == 2:
        if n is None:
            raise ValueError("n is required when the condition is a single window")
        mask = np.broadcast_to(cond.mask, (n,) + cond.mask.shape)
        x_a = np.broadcast_to(cond.x_a, (n,) + cond.x_a.shape)
        cond = ConditionSpec(mask, x_a, cond.eta, cond.gamma, cond.grad_steps, cond.budget)
    elif n is not None and n != len(cond.mask):
        raise ValueError(f"condition holds {len(cond.mask)} windows but n={n}")
    return cond, len(cond.mask)


def sample_conditional(
    model,
    sched: NoiseSchedule,
    cond: ConditionSpec,
    n: int | None = None,
    seed: int = 0,
    mode: str = "guided",
    clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Conditional sampling with multi-step reconstruction guidance.

    Per step ``t``: ``K[t]`` updates ``x_t <- x_t - eta * grad(L1 + gamma L2)``,
    then ``x_{t-1}`` from the posterior of the refreshed estimate, then the
    observed coordinates are replaced. ``mode="replace-only"`` skips guidance.
    ``cond.x_a`` and the result are in data units; observed coordinates of
    the result equal ``cond.x_a`` exactly.
    """
    if mode not in ("guided", "replace-only"):
        raise ValueError(f"unknown conditional mode {mode!r}")
    clip = _check_clip(clip)
    cond, n = _broadcast_condition(cond, n)
    observed = np.asarray(cond.x_a, dtype=np.float64)
    cond = ConditionSpec(
        cond.mask, model.cfg.encode(observed), cond.eta, cond.gamma, cond.grad_steps, cond.budget
    )
    tau, d = _window_shape(model)
    if cond.mask.shape[1:] != (tau, d):
        raise ValueError(f"condition windows {cond.mask.shape[1:]} do not match model {(tau, d)}")
    k = cond.steps_for(sched.T) if mode == "guided" else np.zeros(sched.T + 1, dtype=np.int64)
    guide = mode == "guided" and cond.eta > 0

    rng = stream(seed, "sample")
    grng = stream(seed, "guide")
    x = rng.standard_normal((n, tau, d))
    for t in range(sched.T, 0, -1):
        if guide:
            for _ in range(int(k[t])):
                zc = grng.standard_normal(x.shape)
                grad, _ = guidance_gradient(model, x, t, cond, sched, zc)
                x = x - cond.eta * grad
        x0hat = _x0(model, x, t, clip)
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x_prev = reverse_step(x0hat, x, t, z, sched)
        eps = rng.standard_normal(x.shape)
        x = replace_observed(cond.x_a, cond.mask, x_prev, t, eps, sched)
    return np.where(cond.mask, observed, model.cfg.decode(x))


def run_request(model, sched: NoiseSchedule, req: SampleRequest) -> np.ndarray:
    if req.mode == "unconditional":
        return sample_unconditional(model, sched, req.n_samples, req.seed, clip=req.clip)
    return sample_conditional(
        model, sched, req.condition, req.n_samples, req.seed, req.mode, clip=req.clip
    )
