"""Encoder-decoder x0 approximator with trend, seasonal and residual outputs.

The encoder is a stack of pre-norm transformer layers over the embedded noisy
window. Each decoder block runs self-attention, cross-attention to the
encoder output and a feed-forward layer, and then emits one polynomial trend
term and one band-limited seasonal term. The estimate of the clean window is

    x0hat = sum(trend terms) + sum(seasonal terms) + residual

where the residual is a linear read-out of the last decoder block. The
diffusion step enters every normalization through adaptive layer norm
(``a_t * LayerNorm(w) + b_t``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import ComplexSpectrum, Tensor

__all__ = [
    "DenoiserConfig",
    "DecompositionOutput",
    "DenoiserModel",
    "init_params",
    "poly_basis",
    "trend_layer",
    "fourier_layer",
    "step_embedding",
    "save_checkpoint",
    "load_checkpoint",
    "load_optimizer_state",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "tsdiffusion-checkpoint/1"


@dataclass(frozen=True)
class DenoiserConfig:
    seq_len: int
    n_channels: int
    n_heads: int = 4
    head_dim: int = 16
    enc_layers: int = 1
    dec_layers: int = 2
    trend_degree: int = 3
    top_k: int = 3
    timesteps: int = 500
    mlp_ratio: int = 4
    embed_kernel: int = 1
    centered: bool = False

    def __post_init__(self):
        problems = []
        if self.seq_len < 2:
            problems.append("seq_len must be >= 2")
        if self.n_channels < 1:
            problems.append("n_channels must be >= 1")
        if self.n_heads < 1 or self.head_dim < 1:
            problems.append("n_heads and head_dim must be >= 1")
        if self.enc_layers < 0:
            problems.append("enc_layers must be >= 0")
        if self.dec_layers < 1:
            problems.append("dec_layers must be >= 1")
        if self.trend_degree < 1:
            problems.append("trend_degree must be >= 1")
        if not 1 <= self.top_k <= self.seq_len // 2 + 1:
            problems.append(f"top_k must be in [1, {self.seq_len // 2 + 1}]")
        if self.timesteps < 1:
            problems.append("timesteps must be >= 1")
        if self.mlp_ratio < 1:
            problems.append("mlp_ratio must be >= 1")
        if self.embed_kernel < 1 or self.embed_kernel % 2 == 0:
            problems.append("embed_kernel must be a positive odd number")
        if problems:
            raise ValueError("invalid DenoiserConfig: " + "; ".join(problems))

    @property
    def width(self) -> int:
        return self.n_heads * self.head_dim

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{"embed_kernel": 1, "centered": False, **d})

    def to_dict(self) -> dict:
        return asdict(self)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Map data-space windows to the space the chain diffuses in.

        With ``centered`` set, data on ``[0, 1]`` is diffused as ``2x - 1`` so
        that it spans the same range as the unit-variance noise.
        """
        x = np.asarray(x, dtype=np.float64)
        return 2.0 * x - 1.0 if self.centered else x

    def decode(self, y: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`encode`."""
        y = np.asarray(y, dtype=np.float64)
        return 0.5 * (y + 1.0) if self.centered else y


@dataclass
class DecompositionOutput:
    trend: Tensor
    season: Tensor
    residual: Tensor
    x0hat: Tensor
    trend_blocks: list[Tensor] = field(default_factory=list)
    season_blocks: list[Tensor] = field(default_factory=list)


def poly_basis(seq_len: int, degree: int) -> np.ndarray:
    """``[1, c, c^2, ..., c^p]`` with ``c = [0, 1, ..., tau-1] / tau``."""
    c = np.arange(seq_len, dtype=np.float64) / seq_len
    return np.stack([c**j for j in range(degree + 1)], axis=1)


def trend_layer(w_tr: Tensor, block_mean: Tensor, params: dict, degree: int) -> Tensor:
    """Polynomial trend of one decoder block.

    ``params`` holds ``wf`` (h, d) and ``bf`` (d,) mapping features to data
    channels, and ``wt`` (p+1, tau) and ``bt`` (p+1, 1) mapping time to the
    polynomial coefficient block. Output is ``C @ coef + block_mean``.
    """
    seq_len = w_tr.shape[-2]
    if params["wt"].shape != (degree + 1, seq_len):
        raise ValueError(f"trend time map must be {(degree + 1, seq_len)}, got {params['wt'].shape}")
    if w_tr.shape[-1] != params["wf"].shape[0]:
        raise ValueError("trend feature map does not match block width")
    u = tn.matmul(w_tr, params["wf"]) + params["bf"]
    coef = tn.matmul(params["wt"], u) + params["bt"]
    basis = Tensor(poly_basis(seq_len, degree))
    return tn.matmul(basis, coef) + block_mean


def _topk_mask(amplitude: np.ndarray, k: int) -> np.ndarray:
    """Mask of the k largest non-DC bins along axis -2; ties go to the lower bin."""
    nbins = amplitude.shape[-2]
    k = min(k, nbins - 1)
    cand = np.moveaxis(amplitude[..., 1:, :], -2, -1)
    order = np.argsort(-cand, axis=-1, kind="stable")[..., :k] + 1
    mask = np.zeros(cand.shape[:-1] + (nbins,))
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return np.moveaxis(mask, -1, -2)


def fourier_layer(w_seas: Tensor, k: int) -> Tensor:
    """Keep the ``k`` largest-amplitude frequencies of each channel.

    Candidate bins are ``1..tau//2`` (the mean is left to the trend path).
    Selection is treated as a constant during differentiation; gradients flow
    through the kept coefficients.
    """
    w_seas = tn.as_tensor(w_seas)
    seq_len = w_seas.shape[-2]
    if not 1 <= k <= seq_len // 2 + 1:
        raise ValueError(f"top_k must be in [1, {seq_len // 2 + 1}], got {k}")
    spec = tn.rdft(w_seas)
    mask = Tensor(_topk_mask(spec.amplitude, k))
    kept = ComplexSpectrum(spec.re * mask, spec.im * mask, seq_len)
    return tn.irdft(kept, seq_len)


def step_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion steps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init kind). Kinds: 'w' fan-in uniform, 'z' zeros, 'ada' scale/shift bias."""
    h, d, tau = cfg.width, cfg.n_channels, cfg.seq_len
    m = cfg.mlp_ratio * h
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "embed.w": ((cfg.embed_kernel * d, h), "w"),
        "embed.b": ((h,), "z"),
        "pos": ((tau, h), "pos"),
        "step.w": ((h, h), "w"),
        "step.b": ((h,), "z"),
    }

    def ada(prefix):
        shapes[f"{prefix}.w"] = ((h, 2 * h), "w")
        shapes[f"{prefix}.b"] = ((2 * h,), "ada")

    def attn(prefix):
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{name}"] = ((h, h), "w")
            shapes[f"{prefix}.b{name}"] = ((h,), "z")

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = ((h, m), "w")
        shapes[f"{prefix}.b1"] = ((m,), "z")
        shapes[f"{prefix}.w2"] = ((m, h), "w")
        shapes[f"{prefix}.b2"] = ((h,), "z")

    for i in range(cfg.enc_layers):
        ada(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ada(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    for i in range(cfg.dec_layers):
        ada(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        ada(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ada(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
        shapes[f"dec{i}.trend.wf"] = ((h, d), "w")
        shapes[f"dec{i}.trend.bf"] = ((d,), "z")
        shapes[f"dec{i}.trend.wt"] = ((cfg.trend_degree + 1, tau), "trend")
        shapes[f"dec{i}.trend.bt"] = ((cfg.trend_degree + 1, 1), "z")
        shapes[f"dec{i}.season.w"] = ((h, d), "w")
        shapes[f"dec{i}.season.b"] = ((d,), "z")
    shapes["resid.w"] = ((h, d), "w")
    shapes["resid.b"] = ((d,), "z")
    return shapes


# Keeps the initial polynomial coefficients small relative to unit activations.
_TREND_INIT_GAIN = 0.1


def init_params(cfg: DenoiserConfig, seed: int) -> "DenoiserModel":
    """Fan-in scaled uniform initialization, deterministic in ``seed``."""
    if not isinstance(cfg, DenoiserConfig):
        raise TypeError("cfg must be a DenoiserConfig")
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind) in _param_shapes(cfg).items():
        if kind == "z":
            value = np.zeros(shape)
        elif kind == "ada":
            value = np.zeros(shape)
            value[: shape[0] // 2] = 1.0
        elif kind == "pos":
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0] if kind == "w" else shape[1])
            if kind == "trend":
                bound *= _TREND_INIT_GAIN
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    return DenoiserModel(cfg, params)


def _neighbourhood(x: Tensor, kernel: int) -> Tensor:
    """Stack each step with its ``kernel // 2`` neighbours on both sides (zero padded) along channels."""
    if kernel == 1:
        return x
    r = kernel // 2
    bsz, tau, d = x.shape
    pad = Tensor(np.zeros((bsz, r, d)))
    padded = tn.concat([pad, x, pad], axis=1)
    return tn.concat([padded[:, o : o + tau, :] for o in range(kernel)], axis=2)


class DenoiserModel:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor]):
        expected = _param_shapes(cfg)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, (shape, _) in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params

    @property
    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(
            self.cfg, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        )

    def __call__(self, xt, t) -> DecompositionOutput:
        return self.forward(xt, t)

    def x0(self, xt, t) -> Tensor:
        return self.forward(xt, t).x0hat

    # -- building blocks ----------------------------------------------------

    def _ada_ln(self, prefix: str, w: Tensor, emb: Tensor) -> Tensor:
        h = self.cfg.width
        ab = tn.matmul(emb, self.params[f"{prefix}.w"]) + self.params[f"{prefix}.b"]
        bsz = ab.shape[0]
        scale = tn.reshape(ab[:, :h], (bsz, 1, h))
        shift = tn.reshape(ab[:, h:], (bsz, 1, h))
        return tn.layer_norm(w) * scale + shift

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor) -> Tensor:
        p = self.params
        bsz, tau, h = xq.shape
        heads, hd = self.cfg.n_heads, self.cfg.head_dim

        def split(x):
            return tn.transpose(tn.reshape(x, (bsz, tau, heads, hd)), (0, 2, 1, 3))

        q = split(tn.matmul(xq, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"])
        k = split(tn.matmul(xkv, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"])
        v = split(tn.matmul(xkv, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"])
        o = tn.softmax_attention(q, k, v, 1.0 / math.sqrt(hd))
        o = tn.reshape(tn.transpose(o, (0, 2, 1, 3)), (bsz, tau, h))
        return tn.matmul(o, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = tn.gelu(tn.matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
        return tn.matmul(hidden, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]

    # -- forward --------------------------------------------------------------

    def forward(self, xt, t) -> DecompositionOutput:
        cfg, p = self.cfg, self.params
        xt = tn.as_tensor(xt)
        squeeze = xt.ndim == 2
        if squeeze:
            xt = tn.reshape(xt, (1,) + xt.shape)
        bsz = xt.shape[0]
        if xt.shape[1:] != (cfg.seq_len, cfg.n_channels):
            raise ValueError(f"expected windows of shape {(cfg.seq_len, cfg.n_channels)}, got {xt.shape[1:]}")
        t = np.broadcast_to(np.asarray(t), (bsz,))
        if np.any(t < 1) or np.any(t > cfg.timesteps):
            raise ValueError(f"diffusion step out of range [1, {cfg.timesteps}]")
        try:
            out = self._forward(xt, t)
        except FloatingPointError as err:
            raise FloatingPointError(
                f"non-finite activation in denoiser forward (steps {np.unique(t)[:8]}...): {err}"
            ) from err
        if squeeze:
            out = DecompositionOutput(
                *(tn.reshape(x, x.shape[1:]) for x in (out.trend, out.season, out.residual)),
                x0hat=None,
                trend_blocks=[tn.reshape(x, x.shape[1:]) for x in out.trend_blocks],
                season_blocks=[tn.reshape(x, x.shape[1:]) for x in out.season_blocks],
            )
            out.x0hat = out.trend + out.season + out.residual
        return out

    def _forward(self, xt: Tensor, t: np.ndarray) -> DecompositionOutput:
        cfg, p = self.cfg, self.params
        emb = Tensor(step_embedding(t, cfg.width))
        emb = tn.gelu(tn.matmul(emb, p["step.w"]) + p["step.b"])

        x = tn.matmul(_neighbourhood(xt, cfg.embed_kernel), p["embed.w"]) + p["embed.b"] + p["pos"]

        z = x
        for i in range(cfg.enc_layers):
            zn = self._ada_ln(f"enc{i}.ln1", z, emb)
            z = z + self._attention(f"enc{i}.attn", zn, zn)
            z = z + self._ffn(f"enc{i}.ffn", self._ada_ln(f"enc{i}.ln2", z, emb))
        enc = tn.layer_norm(z)

        y = x
        trends, seasons = [], []
        for i in range(cfg.dec_layers):
            yn = self._ada_ln(f"dec{i}.ln1", y, emb)
            y = y + self._attention(f"dec{i}.self", yn, yn)
            y = y + self._attention(f"dec{i}.cross", self._ada_ln(f"dec{i}.ln2", y, emb), enc)
            y = y + self._ffn(f"dec{i}.ffn", self._ada_ln(f"dec{i}.ln3", y, emb))

            seas_in = tn.matmul(y, p[f"dec{i}.season.w"]) + p[f"dec{i}.season.b"]
            block_mean = tn.mean(seas_in, axis=1, keepdims=True)
            trend_params = {k: p[f"dec{i}.trend.{k}"] for k in ("wf", "bf", "wt", "bt")}
            trends.append(trend_layer(y, block_mean, trend_params, cfg.trend_degree))
            seasons.append(fourier_layer(seas_in, cfg.top_k))

        trend = trends[0]
        for tr in trends[1:]:
            trend = trend + tr
        season = seasons[0]
        for s in seasons[1:]:
            season = season + s
        residual = tn.matmul(y, p["resid.w"]) + p["resid.b"]
        x0hat = trend + season + residual
        return DecompositionOutput(trend, season, residual, x0hat, trends, seasons)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path, model: DenoiserModel, extra: dict | None = None, optimizer_state: dict[str, np.ndarray] | None = None
) -> None:
    """Write config, schedule length and named parameters to one ``.npz`` file.

    ``optimizer_state`` (e.g. ``Adam.state_arrays()``) is stored alongside so
    training can resume; read it back with :func:`load_optimizer_state`.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "timesteps": model.cfg.timesteps,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.data for k, v in sorted(model.params.items())}
    for k, v in sorted((optimizer_state or {}).items()):
        arrays[f"opt/{k}"] = np.asarray(v)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    _write_npz(Path(path), arrays)


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez stamps the current time into the zip headers; fix it for byte-stable files.
    import io
    import zipfile

    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[DenoiserModel, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = {
            k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True)
            for k in z.files
            if k.startswith("param/")
        }
    cfg = DenoiserConfig.from_dict(meta["config"])
    return DenoiserModel(cfg, params), meta


def load_optimizer_state(path) -> dict[str, np.ndarray] | None:
    """Optimizer arrays saved with the checkpoint, or ``None`` if there are none."""
    with np.load(Path(path), allow_pickle=False) as z:
        state = {k[len("opt/"):]: z[k].copy() for k in z.files if k.startswith("opt/")}
    return state or None
