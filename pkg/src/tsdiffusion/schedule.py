"""Noise schedule, forward corruption and the x0-parameterized reverse step.

Arrays are indexed by diffusion step ``t = 1..T``; index 0 holds the un-noised
stage (``alpha_bar[0] = 1``, ``beta[0] = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor

__all__ = [
    "NoiseSchedule",
    "cosine_schedule",
    "linear_schedule",
    "respace",
    "q_sample",
    "posterior_mean",
    "reverse_step",
    "eps_from_x0",
    "x0_from_eps",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients of a Gaussian diffusion with ``T`` steps."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    post_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        one_minus = 1.0 - alpha_bar
        one_minus[0] = 1.0  # index 0 is never used as a reverse step
        c0 = np.sqrt(prev) * beta / one_minus
        c1 = np.sqrt(alpha) * (1.0 - prev) / one_minus
        post_var = (1.0 - prev) / one_minus * beta
        c0[0] = c1[0] = post_var[0] = 0.0
        arrays = (beta, alpha, alpha_bar, c0, c1, post_var)
        for a in arrays:
            a.setflags(write=False)
        return cls(*arrays)

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(np.mod(t, 1) == 0):
                raise ValueError(f"diffusion step must be an integer, got {t}")
            t = t.astype(np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step out of range [1, {self.T}]: {t}")
        return t


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule: ``alpha_bar(t) = f(t)/f(0)``, ``f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    abar = f / f[0]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], max_beta)
    return NoiseSchedule.from_betas(betas)


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def respace(sched: NoiseSchedule, n_steps: int) -> tuple[NoiseSchedule, np.ndarray]:
    """Shorter chain visiting ``n_steps`` evenly spaced steps of ``sched``.

    Returns the new schedule and ``steps`` with ``steps[i]`` the original
    step that new step ``i`` stands for (``steps[0] = 0``). The new
    ``alpha_bar`` agrees with the original at every visited step, except
    where a step's beta is capped at the original schedule's largest beta.
    """
    if not 1 <= n_steps <= sched.T:
        raise ValueError(f"n_steps must lie in [1, {sched.T}]")
    steps = np.unique(np.round(np.linspace(0, sched.T, n_steps + 1)).astype(np.int64))
    abar = sched.alpha_bar[steps]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], sched.beta.max())
    return NoiseSchedule.from_betas(betas), steps


def _coef(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast per-example coefficients over trailing data axes."""
    c = values[t]
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per leading batch entry. Tensor inputs
    give a Tensor result; arrays give arrays.
    """
    t = sched.check_step(t)
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    epsd = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if x0d.shape != epsd.shape:
        raise ValueError("eps must match x0 in shape")
    a = _coef(np.sqrt(sched.alpha_bar), t, x0d.ndim)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, x0d.ndim)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return as_tensor(x0) * a + as_tensor(eps) * b
    return a * x0d + b * epsd


def posterior_mean(x0hat, xt, t, sched: NoiseSchedule):
    """Mean of ``q(x_{t-1} | x_t, x0)`` with ``x0`` replaced by the estimate."""
    t = sched.check_step(t)
    ndim = x0hat.ndim if hasattr(x0hat, "ndim") else np.ndim(x0hat)
    if np.shape(getattr(x0hat, "data", x0hat)) != np.shape(getattr(xt, "data", xt)):
        raise ValueError("x0hat and xt must have the same shape")
    c0 = _coef(sched.c0, t, ndim)
    c1 = _coef(sched.c1, t, ndim)
    if isinstance(x0hat, Tensor) or isinstance(xt, Tensor):
        return as_tensor(x0hat) * c0 + as_tensor(xt) * c1
    return c0 * np.asarray(x0hat) + c1 * np.asarray(xt)


def reverse_step(x0hat, xt, t, z, sched: NoiseSchedule) -> np.ndarray:
    """One ancestral step ``x_{t-1} = mean + sqrt(post_var_t) z``.

    The noise term uses the posterior standard deviation; at ``t = 1`` the
    posterior variance is zero so ``z`` has no effect.
    """
    t = sched.check_step(t)
    x0hat = np.asarray(getattr(x0hat, "data", x0hat))
    xt = np.asarray(getattr(xt, "data", xt))
    z = np.asarray(getattr(z, "data", z))
    mean = posterior_mean(x0hat, xt, t, sched)
    return mean + _coef(np.sqrt(sched.post_var), t, x0hat.ndim) * z


def eps_from_x0(xt, x0hat, t, sched: NoiseSchedule):
    t = sched.check_step(t)
    xt = np.asarray(getattr(xt, "data", xt))
    x0hat = np.asarray(getattr(x0hat, "data", x0hat))
    a = _coef(np.sqrt(sched.alpha_bar), t, xt.ndim)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, xt.ndim)
    return (xt - a * x0hat) / b


def x0_from_eps(xt, eps, t, sched: NoiseSchedule):
    t = sched.check_step(t)
    xt = np.asarray(getattr(xt, "data", xt))
    eps = np.asarray(getattr(eps, "data", eps))
    a = _coef(np.sqrt(sched.alpha_bar), t, xt.ndim)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, xt.ndim)
    return (xt - b * eps) / a
