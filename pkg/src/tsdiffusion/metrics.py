"""Sample-quality scores for generated windows.

* correlational: distance between cross-channel correlation matrices
* discriminative: ``|accuracy - 0.5|`` of a post-hoc real-vs-fake GRU classifier
* predictive: MAE on real data of a one-step GRU predictor trained on fake data
* marginal_tv: total variation between per-channel value histograms
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .rng import stream
from .tensor import GradTape, Tensor
from .training import Adam

log = logging.getLogger(__name__)

__all__ = [
    "correlational_score",
    "discriminative_score",
    "predictive_score",
    "marginal_tv",
    "MetricReport",
    "evaluate",
    "append_leaderboard",
]

RNN_CELL = "gru"


def _check_batches(real: np.ndarray, fake: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim != 3 or fake.ndim != 3:
        raise ValueError("expected batches of shape (n, seq_len, channels)")
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"window shapes differ: {real.shape[1:]} vs {fake.shape[1:]}")
    return real, fake


def _correlation(x: np.ndarray) -> np.ndarray:
    """Sample-averaged, time-averaged covariance turned into a correlation matrix."""
    centered = x - x.mean(axis=1, keepdims=True)
    cov = np.einsum("ntj,ntk->jk", centered, centered) / (x.shape[0] * x.shape[1])
    std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    flat = std <= 1e-12 * max(std.max(initial=0.0), 1.0)
    if flat.any():
        log.warning("zero-variance channels %s: their correlations are set to 0", np.flatnonzero(flat).tolist())
    safe = np.where(flat, 1.0, std)
    corr = cov / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr


def correlational_score(real, fake) -> float:
    """``(1/10) * sum_ij |corr_real(i, j) - corr_fake(i, j)|``.

    The 1/10 factor is kept as published, so the score grows with ``d^2``.
    """
    real, fake = _check_batches(real, fake)
    return float(np.abs(_correlation(real) - _correlation(fake)).sum() / 10.0)


def marginal_tv(real, fake, bins: int = 50, value_range: tuple[float, float] | None = None) -> float:
    """Per-channel total variation between value histograms, averaged over channels."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("marginal_tv needs non-empty inputs")
    d = real.shape[-1]
    if fake.shape[-1] != d:
        raise ValueError("channel counts differ")
    r2, f2 = real.reshape(-1, d), fake.reshape(-1, d)
    tvs = []
    for c in range(d):
        lo, hi = value_range or (min(r2[:, c].min(), f2[:, c].min()), max(r2[:, c].max(), f2[:, c].max()))
        if hi <= lo:
            hi = lo + 1.0
        p, _ = np.histogram(r2[:, c], bins=bins, range=(lo, hi))
        q, _ = np.histogram(f2[:, c], bins=bins, range=(lo, hi))
        tvs.append(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())
    return float(np.mean(tvs))


# --- post-hoc recurrent models ---------------------------------------------


def _init_rnn(n_in: int, hidden: int, n_out: int, layers: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    bound = 1.0 / math.sqrt(hidden)
    for i in range(layers):
        fan_in = n_in if i == 0 else hidden
        params[f"gru{i}.w_ih"] = rng.uniform(-bound, bound, (fan_in, 3 * hidden))
        params[f"gru{i}.w_hh"] = rng.uniform(-bound, bound, (hidden, 3 * hidden))
        params[f"gru{i}.b_ih"] = rng.uniform(-bound, bound, 3 * hidden)
        params[f"gru{i}.b_hh"] = rng.uniform(-bound, bound, 3 * hidden)
    params["out.w"] = rng.uniform(-bound, bound, (hidden, n_out))
    params["out.b"] = np.zeros(n_out)
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def _rnn_forward(params: dict[str, Tensor], x, layers: int) -> Tensor:
    h = tn.as_tensor(x)
    for i in range(layers):
        h = tn.gru(h, params[f"gru{i}.w_ih"], params[f"gru{i}.w_hh"], params[f"gru{i}.b_ih"], params[f"gru{i}.b_hh"])
    return h


def _fit(params, loss_fn, x, y, iterations, batch_size, lr, rng) -> None:
    opt = Adam(params, betas=(0.9, 0.999))
    names = list(params)
    sources = [params[k] for k in names]
    for _ in range(iterations):
        idx = rng.integers(0, len(x), size=min(batch_size, len(x)))
        with GradTape() as tape:
            loss = loss_fn(params, x[idx], y[idx])
        grads = dict(zip(names, tape.gradient(loss, sources)))
        opt.step(grads, lr)


def discriminative_score(
    real,
    fake,
    seed: int = 0,
    hidden: int | None = None,
    layers: int = 2,
    iterations: int = 2000,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> float:
    """Train a GRU to tell real from fake on 80% of each set; ``|test acc - 0.5|``."""
    real, fake = _check_batches(real, fake)
    n = min(len(real), len(fake))
    if 2 * n < 64:
        raise ValueError("discriminative_score needs at least 64 windows in total")
    d = real.shape[2]
    hidden = hidden or 4 * d
    rng = stream(seed, "metrics", 0)
    real = real[rng.permutation(len(real))[:n]]
    fake = fake[rng.permutation(len(fake))[:n]]
    cut = int(0.8 * n)
    x_train = np.concatenate([real[:cut], fake[:cut]])
    y_train = np.concatenate([np.ones(cut), np.zeros(cut)])
    x_test = np.concatenate([real[cut:], fake[cut:]])
    y_test = np.concatenate([np.ones(n - cut), np.zeros(n - cut)])

    params = _init_rnn(d, hidden, 1, layers, rng)

    def logits(p, xb):
        h = _rnn_forward(p, xb, layers)[:, -1, :]
        return tn.reshape(tn.matmul(h, p["out.w"]) + p["out.b"], (len(xb),))

    def bce(p, xb, yb):
        z = logits(p, xb)
        return tn.mean(tn.softplus(z) - z * Tensor(yb))

    _fit(params, bce, x_train, y_train, iterations, batch_size, lr, rng)
    pred = logits(params, x_test).data > 0
    acc = float(np.mean(pred == (y_test > 0.5)))
    return abs(acc - 0.5)


def predictive_score(
    real,
    fake,
    seed: int = 0,
    hidden: int | None = None,
    layers: int = 2,
    iterations: int = 2000,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> float:
    """Train-on-fake, test-on-real MAE of one-step-ahead prediction of every channel."""
    real, fake = _check_batches(real, fake)
    if real.shape[1] < 2:
        raise ValueError("predictive_score needs windows of length >= 2")
    d = real.shape[2]
    hidden = hidden or 4 * d
    rng = stream(seed, "metrics", 1)
    params = _init_rnn(d, hidden, d, layers, rng)

    def predict(p, xb):
        return tn.matmul(_rnn_forward(p, xb, layers), p["out.w"]) + p["out.b"]

    def mae(p, xb, yb):
        return tn.mean(tn.tabs(predict(p, xb) - Tensor(yb)))

    _fit(params, mae, fake[:, :-1], fake[:, 1:], iterations, batch_size, lr, rng)
    return float(np.mean(np.abs(predict(params, real[:, :-1]).data - real[:, 1:])))


# --- report --------------------------------------------------------------------


@dataclass
class MetricReport:
    correlational: float
    discriminative: float
    discriminative_std: float
    predictive: float
    predictive_std: float
    marginal_tv: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate(
    real,
    fake,
    seed: int = 0,
    n_runs: int = 3,
    iterations: int = 2000,
    bins: int = 50,
) -> MetricReport:
    """All scores; the learned ones are repeated ``n_runs`` times with derived seeds."""
    real, fake = _check_batches(real, fake)
    disc = [discriminative_score(real, fake, seed=seed * 1000 + i, iterations=iterations) for i in range(n_runs)]
    pred = [predictive_score(real, fake, seed=seed * 1000 + i, iterations=iterations) for i in range(n_runs)]
    return MetricReport(
        correlational=correlational_score(real, fake),
        discriminative=float(np.mean(disc)),
        discriminative_std=float(np.std(disc)),
        predictive=float(np.mean(pred)),
        predictive_std=float(np.std(pred)),
        marginal_tv=marginal_tv(real, fake, bins=bins),
        metadata={
            "n_real": int(len(real)),
            "n_fake": int(len(fake)),
            "seq_len": int(real.shape[1]),
            "channels": int(real.shape[2]),
            "seed": int(seed),
            "n_runs": int(n_runs),
            "iterations": int(iterations),
            "bins": int(bins),
            "rnn_cell": RNN_CELL,
            "rnn_layers": 2,
            "rnn_hidden": int(4 * real.shape[2]),
        },
    )


LEADERBOARD_FIELDS = [
    "run",
    "correlational",
    "discriminative",
    "discriminative_std",
    "predictive",
    "predictive_std",
    "marginal_tv",
    "n_real",
    "n_fake",
    "seed",
]


def append_leaderboard(path, report: MetricReport, run: str) -> None:
    path = Path(path)
    new = not path.exists()
    row = {k: v for k, v in report.to_dict().items() if k in LEADERBOARD_FIELDS}
    row.update({k: report.metadata.get(k) for k in ("n_real", "n_fake", "seed")})
    row["run"] = run
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LEADERBOARD_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)
