"""Weighted time + frequency reconstruction loss and the Adam training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .rng import stream
from .schedule import NoiseSchedule, q_sample
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "loss_weight",
    "diffusion_loss",
    "Adam",
    "learning_rate",
    "train",
    "TrainResult",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss_lambda: float = 0.01
    lambda_time: float = 1.0
    lambda_freq: float = 1.0
    batch_size: int = 64
    steps: int = 1000
    lr: float = 8e-4
    warmup: int = 500
    adam_betas: tuple[float, float] = (0.9, 0.96)
    adam_eps: float = 1e-8
    lr_floor: float = 1e-5
    max_grad_norm: float | None = None
    log_every: int = 100
    smooth_window: int = 100
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if min(self.loss_lambda, self.lambda_time, self.lambda_freq) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and not 0 <= self.warmup < self.steps:
            raise ValueError("warmup must be smaller than the number of steps")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def loss_weight(t, sched: NoiseSchedule, lam: float) -> np.ndarray:
    """``lam * alpha_t (1 - alpha_bar_t) / beta_t^2``."""
    t = sched.check_step(t)
    return lam * sched.alpha[t] * (1.0 - sched.alpha_bar[t]) / sched.beta[t] ** 2


def _bin_weights(n: int) -> np.ndarray:
    # conjugate bins appear twice in the full spectrum; DC and Nyquist once
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def reconstruction_terms(x0: np.ndarray, x0hat: Tensor) -> tuple[Tensor, Tensor]:
    """Per-example mean squared error in time and in frequency.

    The frequency term is the full-spectrum squared modulus of the DFT
    difference, scaled by ``1/(tau^2 d)`` so both terms share units.
    """
    diff = x0hat - Tensor(x0)
    _, tau, d = diff.shape
    time_term = tn.mean(tn.square(diff), axis=(1, 2))
    spec = tn.rdft(diff)
    power = tn.square(spec.re) + tn.square(spec.im)
    w = Tensor(_bin_weights(tau)[None, :, None])
    freq_term = tn.tsum(power * w, axis=(1, 2)) / float(tau * tau * d)
    return time_term, freq_term


def diffusion_loss(model, x0, t, eps, sched: NoiseSchedule, cfg: TrainConfig) -> Tensor:
    """Batch mean of ``w_t [lambda_time * L_time + lambda_freq * L_freq]``.

    ``model`` needs an ``x0(xt, t) -> Tensor`` method. ``t`` holds one step per
    example and ``eps`` the forward-process noise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = sched.check_step(t)
    xt = q_sample(x0, t, eps, sched)
    x0hat = model.x0(Tensor(xt), t)
    time_term, freq_term = reconstruction_terms(x0, x0hat)
    per_example = time_term * cfg.lambda_time + freq_term * cfg.lambda_freq
    w = Tensor(loss_weight(t, sched, cfg.loss_lambda))
    return tn.mean(per_example * w)


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.96), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m/{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v/{k}"], dtype=np.float64)
        self.t = int(arrays["adam.t"][0])


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then linear decay to ``cfg.lr_floor`` at the last step."""
    if cfg.warmup > 0 and step <= cfg.warmup:
        return max(cfg.lr * step / cfg.warmup, cfg.lr_floor)
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min((step - cfg.warmup) / span, 1.0)
    return max(cfg.lr + (cfg.lr_floor - cfg.lr) * frac, cfg.lr_floor)


@dataclass
class TrainResult:
    model: object
    history: list[tuple[int, float, float]] = field(default_factory=list)
    optimizer: Adam | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([h[1] for h in self.history])


def train(
    windows: np.ndarray,
    model,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    callback: Callable[[int, float, object], None] | None = None,
    optimizer: Adam | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    history: list[tuple[int, float, float]] | None = None,
) -> TrainResult:
    """Optimize ``model`` in place on ``(n, tau, d)`` windows.

    Step ``s`` draws its batch, diffusion steps and noise from the ``train``
    stream indexed by ``s``, so a run resumed from ``start_step`` with the
    saved optimizer replays the same trajectory. ``stop_step`` ends the run
    early without changing the learning-rate schedule. History rows are
    ``(step, loss, smoothed_loss)``; pass the rows of earlier segments as
    ``history`` to keep the smoothed curve continuous across a resume.
    Windows are given in data units and pass through ``model.cfg.encode``.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ValueError("windows must have shape (n, seq_len, channels)")
    windows = model.cfg.encode(windows)
    opt = optimizer or Adam(model.params, cfg.adam_betas, cfg.adam_eps)
    names = list(model.params)
    sources = [model.params[k] for k in names]
    result = TrainResult(model, list(history or []), opt)
    recent: list[float] = [row[1] for row in result.history[-cfg.smooth_window :]]
    last = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    for step in range(start_step + 1, last + 1):
        rng = stream(cfg.seed, "train", step)
        idx = rng.integers(0, len(windows), size=cfg.batch_size)
        x0 = windows[idx]
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal(x0.shape)
        try:
            with GradTape() as tape:
                loss = diffusion_loss(model, x0, t, eps, sched, cfg)
        except FloatingPointError as err:
            raise TrainingDiverged(f"step {step}: {err}") from err
        value = loss.item()
        if not math.isfinite(value) or value > cfg.divergence_threshold:
            raise TrainingDiverged(f"step {step}: loss {value:.4g} (lr {learning_rate(step, cfg):.3g})")
        grads = dict(zip(names, tape.gradient(loss, sources)))
        if cfg.max_grad_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.max_grad_norm:
                grads = {k: g * (cfg.max_grad_norm / norm) for k, g in grads.items()}
        opt.step(grads, learning_rate(step, cfg))

        recent.append(value)
        if len(recent) > cfg.smooth_window:
            recent.pop(0)
        smoothed = float(np.mean(recent))
        result.history.append((step, value, smoothed))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f smoothed %.5f", step, value, smoothed)
            if callback is not None:
                callback(step, value, model)
    return result
