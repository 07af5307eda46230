"""Synthetic generators, CSV windowing, normalization and observation masks.

Batches are float arrays of shape ``(n, seq_len, channels)``. Masks use
``True`` for observed coordinates.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "Normalizer",
    "TrendSeasonBatch",
    "MaskSpec",
    "gen_sines",
    "gen_trend_season",
    "load_csv",
    "read_grid_csv",
    "write_grid_csv",
    "gen_mask",
    "gen_masks",
    "train_test_split",
]


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class Normalizer:
    """Per-channel affine map to [0, 1] (``minmax``) or zero mean / unit std (``zscore``)."""

    kind: str
    offset: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, kind: str = "minmax") -> "Normalizer":
        values = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
        if kind == "minmax":
            lo, hi = values.min(axis=0), values.max(axis=0)
            scale = hi - lo
        elif kind == "zscore":
            lo, scale = values.mean(axis=0), values.std(axis=0)
        else:
            raise ValueError(f"unknown normalization {kind!r}")
        flat = scale == 0
        if flat.any():
            log.warning("channels %s have zero range; mapped to a constant", np.flatnonzero(flat).tolist())
            # a constant channel normalizes to 0.5 (minmax) or 0 (zscore)
            if kind == "minmax":
                lo = np.where(flat, lo - 0.5, lo)
            scale = np.where(flat, 1.0, scale)
        return cls(kind, lo, scale)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"kind": self.kind, "offset": self.offset.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["kind"], np.asarray(d["offset"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def gen_sines(
    n: int,
    seq_len: int,
    n_channels: int,
    rng,
    f_lo: float | None = None,
    f_hi: float = 0.5,
    bin_aligned: bool = False,
    shared: bool = False,
    lag: float = np.pi / 4,
) -> np.ndarray:
    """Random sinusoids ``sin(2 pi f j + phi)`` mapped from [-1, 1] to [0, 1].

    By default every (sample, channel) draws its own frequency
    ``f ~ U(f_lo, f_hi)`` cycles/step (``f_lo = 1/seq_len``, or ``f_hi / 2``
    for windows too short to hold a full period below Nyquist) and phase
    ``phi ~ U(-pi, pi)``. With ``shared`` the channels of a sample share one
    frequency and phase, channel ``c`` lagging by ``c * lag`` radians, which
    makes the channels correlated. ``bin_aligned`` snaps frequencies to
    multiples of ``1/seq_len``.
    """
    if min(n, seq_len, n_channels) < 1:
        raise ValueError("n, seq_len and n_channels must be >= 1")
    f_lo = min(1.0 / seq_len, f_hi / 2) if f_lo is None else f_lo
    if not 0 <= f_lo < f_hi:
        raise ValueError("need 0 <= f_lo < f_hi")
    rng = _as_rng(rng)
    cols = 1 if shared else n_channels
    freq = rng.uniform(f_lo, f_hi, size=(n, 1, cols))
    phase = rng.uniform(-np.pi, np.pi, size=(n, 1, cols))
    if bin_aligned:
        freq = np.clip(np.round(freq * seq_len), 1, seq_len // 2) / seq_len
    if shared:
        phase = phase + lag * np.arange(n_channels)[None, None, :]
        freq = np.broadcast_to(freq, (n, 1, n_channels))
    j = np.arange(seq_len, dtype=np.float64)[None, :, None]
    x = np.sin(2 * np.pi * freq * j + phase)
    return (x + 1.0) / 2.0


@dataclass
class TrendSeasonBatch:
    """Normalized series and its exact additive components."""

    series: np.ndarray
    trend: np.ndarray
    season: np.ndarray
    noise: np.ndarray
    frequencies: np.ndarray


def gen_trend_season(
    n: int,
    seq_len: int,
    rng,
    n_channels: int = 1,
    n_seasons: int = 2,
    noise_std: float = 0.05,
    trend_scale: float = 1.0,
    season_amp: tuple[float, float] = (0.1, 0.3),
    max_bin: int | None = None,
) -> TrendSeasonBatch:
    """Cubic trend plus bin-aligned sinusoids plus Gaussian noise.

    The trend is ``a1 c + a2 c^2 + a3 c^3`` on ``c = j / seq_len`` with
    ``a_i ~ U(-trend_scale, trend_scale)``; each seasonal term picks a distinct
    bin in ``[2, max_bin]`` (default ``seq_len // 4``). The whole batch is then
    min-max scaled to [0, 1] with one affine map, applied to every component,
    and ``series`` is defined as the sum of the scaled components.
    """
    if seq_len < 16:
        raise ValueError("gen_trend_season needs seq_len >= 16")
    rng = _as_rng(rng)
    max_bin = seq_len // 4 if max_bin is None else max_bin
    if max_bin - 1 < n_seasons:
        raise ValueError("not enough candidate bins for the requested seasons")
    c = np.arange(seq_len, dtype=np.float64) / seq_len
    coef = rng.uniform(-trend_scale, trend_scale, size=(n, 3, n_channels))
    powers = np.stack([c, c**2, c**3], axis=0)  # (3, tau)
    trend = np.einsum("pt,npc->ntc", powers, coef)

    j = np.arange(seq_len, dtype=np.float64)[None, :, None]
    season = np.zeros((n, seq_len, n_channels))
    bins = np.empty((n, n_seasons, n_channels), dtype=np.int64)
    for ch in range(n_channels):
        for i in range(n):
            bins[i, :, ch] = rng.choice(np.arange(2, max_bin + 1), size=n_seasons, replace=False)
    for s in range(n_seasons):
        amp = rng.uniform(*season_amp, size=(n, 1, n_channels))
        phase = rng.uniform(-np.pi, np.pi, size=(n, 1, n_channels))
        season += amp * np.cos(2 * np.pi * bins[:, s][:, None, :] * j / seq_len + phase)
    noise = rng.normal(0.0, noise_std, size=(n, seq_len, n_channels)) if noise_std > 0 else np.zeros_like(season)

    raw = trend + season + noise
    lo, span = raw.min(), raw.max() - raw.min()
    span = span if span > 0 else 1.0
    trend_n = (trend - lo) / span
    season_n = season / span
    noise_n = noise / span
    series = trend_n + season_n + noise_n
    return TrendSeasonBatch(series, trend_n, season_n, noise_n, bins)


# --- CSV ---------------------------------------------------------------------


def read_grid_csv(path) -> tuple[list[str], np.ndarray]:
    """Header row plus a numeric grid (rows = time steps, columns = channels)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell in {row}") from None
            if len(rows[-1]) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
    grid = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
    if not np.isfinite(grid).all():
        raise ValueError(f"{path}: non-finite values")
    return header, grid


def write_grid_csv(path, grid: np.ndarray, header: list[str] | None = None, fmt: str = "%.10g") -> None:
    grid = np.asarray(grid)
    if grid.ndim == 1:
        grid = grid[:, None]
    header = header or [f"ch{i}" for i in range(grid.shape[1])]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in grid:
            fh.write(",".join(fmt % v for v in row) + "\n")


def load_csv(path, seq_len: int, stride: int = 1, normalization: str = "minmax") -> tuple[np.ndarray, Normalizer]:
    """Sliding windows over a channel-per-column CSV, normalized per channel.

    The normalizer is fitted on the whole file and returned for inversion.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _, grid = read_grid_csv(path)
    if len(grid) < seq_len:
        raise ValueError(f"{path}: {len(grid)} rows, fewer than seq_len={seq_len}")
    norm = Normalizer.fit(grid, normalization)
    scaled = norm.normalize(grid)
    starts = range(0, len(grid) - seq_len + 1, stride)
    return np.stack([scaled[s : s + seq_len] for s in starts]), norm


def train_test_split(x: np.ndarray, rng: np.random.Generator, train_frac: float = 0.9):
    idx = rng.permutation(len(x))
    cut = int(round(train_frac * len(x)))
    return x[idx[:cut]], x[idx[cut:]]


# --- masks -------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """``geometric``: random missing runs at ratio ``missing_ratio`` with mean
    run length ``mean_missing_length``. ``forecast``: first ``horizon`` steps
    observed, the rest to predict."""

    kind: str = "geometric"
    missing_ratio: float = 0.5
    horizon: int | None = None
    mean_missing_length: float = 5.0

    def __post_init__(self):
        if self.kind == "geometric":
            if not 0 < self.missing_ratio < 1:
                raise ValueError("missing_ratio must be in (0, 1)")
            if self.mean_missing_length < 1:
                raise ValueError("mean_missing_length must be >= 1")
        elif self.kind == "forecast":
            if self.horizon is None or self.horizon < 0:
                raise ValueError("forecast masks need a non-negative horizon")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")


def _geometric_channel(tau: int, r: float, lm: float, rng: np.random.Generator) -> np.ndarray:
    lu = max(lm * (1 - r) / r, 1.0)
    observed = np.ones(tau, dtype=bool)
    missing = rng.random() < r
    pos = 0
    while pos < tau:
        run = rng.geometric(1.0 / (lm if missing else lu))
        if missing:
            observed[pos : pos + run] = False
        pos += run
        missing = not missing
    return observed


def gen_mask(spec: MaskSpec, seq_len: int, n_channels: int, rng) -> np.ndarray:
    """Boolean ``(seq_len, n_channels)`` grid, ``True`` = observed."""
    rng = _as_rng(rng)
    if spec.kind == "forecast":
        if spec.horizon >= seq_len:
            log.warning("forecast horizon %d covers the whole window; nothing to predict", spec.horizon)
        mask = np.zeros((seq_len, n_channels), dtype=bool)
        mask[: spec.horizon] = True
        return mask
    cols = [
        _geometric_channel(seq_len, spec.missing_ratio, spec.mean_missing_length, rng)
        for _ in range(n_channels)
    ]
    return np.stack(cols, axis=1)


def gen_masks(spec: MaskSpec, n: int, seq_len: int, n_channels: int, rng) -> np.ndarray:
    rng = _as_rng(rng)
    return np.stack([gen_mask(spec, seq_len, n_channels, rng) for _ in range(n)])
