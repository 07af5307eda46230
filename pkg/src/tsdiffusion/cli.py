"""Command-line runner: gendata, train, sample, impute, forecast, evaluate.

Structured settings live in one JSON run config; flags only carry paths, the
seed and verbosity. Exit codes: 0 success, 1 runtime failure, 2 usage or
config error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import (
    MaskSpec,
    Normalizer,
    gen_masks,
    gen_sines,
    gen_trend_season,
    load_csv,
    read_grid_csv,
    train_test_split,
    write_grid_csv,
)
from .denoiser import (
    DenoiserConfig,
    init_params,
    load_checkpoint,
    load_optimizer_state,
    save_checkpoint,
)
from .metrics import append_leaderboard, evaluate
from .rng import stream
from .sampling import ConditionSpec, respaced, sample_chunk, sample_conditional, sample_unconditional
from .schedule import cosine_schedule
from .training import Adam, TrainConfig, TrainingDiverged, train

log = logging.getLogger("tsdiffusion")

OUTPUT_ROOT_ENV = "TSDIFFUSION_OUTPUT_ROOT"
REPORT_SCHEMA_PATH = Path(__file__).with_name("schemas") / "metric_report.schema.json"


class ConfigError(Exception):
    """Invalid or inconsistent user input; maps to exit code 2."""


# --- run config ----------------------------------------------------------------


def _prop(kind, default, doc, **extra):
    spec = {"description": doc, "default": default, **extra}
    if kind is not None:
        spec["type"] = kind
    return spec


_INT = "integer"
_NUM = "number"
_MODEL_DEFAULTS = {f.name: f.default for f in fields(DenoiserConfig) if f.name not in ("seq_len", "n_channels")}
_TRAIN_DEFAULTS = TrainConfig().to_dict()

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "tsdiffusion run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _prop(_INT, 0, "master seed; every random stream is derived from it", minimum=0),
        "output_dir": _prop(
            ["string", "null"], None, f"default output directory (else ${OUTPUT_ROOT_ENV}/<command>)"
        ),
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": _prop(
                    "string",
                    "sines",
                    "sines | trend-season | csv | windows (a gendata output directory)",
                    enum=["sines", "trend-season", "csv", "windows"],
                ),
                "path": _prop(["string", "null"], None, "CSV file (csv) or gendata directory (windows)"),
                "n_windows": _prop(_INT, 2000, "number of synthetic windows", minimum=1),
                "seq_len": _prop(_INT, 24, "window length tau", minimum=2),
                "n_channels": _prop(_INT, 1, "channels d", minimum=1),
                "stride": _prop(_INT, 1, "sliding-window stride for csv", minimum=1),
                "normalization": _prop("string", "minmax", "minmax | zscore (csv)", enum=["minmax", "zscore"]),
                "f_lo": _prop([_NUM, "null"], None, "sines: lowest frequency, cycles/step (default 1/tau)"),
                "f_hi": _prop(_NUM, 0.5, "sines: highest frequency, cycles/step"),
                "shared": _prop("boolean", False, "sines: channels share frequency and phase (correlated)"),
                "lag": _prop(_NUM, 0.7853981633974483, "sines: per-channel phase lag when shared"),
                "bin_aligned": _prop("boolean", False, "sines: snap frequencies to DFT bins"),
                "noise_std": _prop(_NUM, 0.05, "trend-season: noise std before normalization", minimum=0),
                "n_seasons": _prop(_INT, 2, "trend-season: sinusoids per series", minimum=1),
                "train_fraction": _prop(_NUM, 0.9, "share of windows used for training", exclusiveMinimum=0, maximum=1),
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_heads": _prop(_INT, _MODEL_DEFAULTS["n_heads"], "attention heads", minimum=1),
                "head_dim": _prop(_INT, _MODEL_DEFAULTS["head_dim"], "attention head dimension", minimum=1),
                "enc_layers": _prop(_INT, _MODEL_DEFAULTS["enc_layers"], "encoder layers", minimum=0),
                "dec_layers": _prop(_INT, _MODEL_DEFAULTS["dec_layers"], "decoder blocks D", minimum=1),
                "trend_degree": _prop(_INT, _MODEL_DEFAULTS["trend_degree"], "trend polynomial degree p", minimum=1),
                "top_k": _prop(_INT, _MODEL_DEFAULTS["top_k"], "frequencies kept per seasonal block K", minimum=1),
                "timesteps": _prop(_INT, _MODEL_DEFAULTS["timesteps"], "diffusion steps T", minimum=1),
                "mlp_ratio": _prop(_INT, _MODEL_DEFAULTS["mlp_ratio"], "feed-forward width multiple", minimum=1),
                "embed_kernel": _prop(
                    _INT, _MODEL_DEFAULTS["embed_kernel"], "odd width of the input token embedding window", minimum=1
                ),
                "centered": _prop(
                    "boolean", _MODEL_DEFAULTS["centered"], "diffuse [0, 1] data as 2x - 1 (outputs stay in data units)"
                ),
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "loss_lambda": _prop(_NUM, _TRAIN_DEFAULTS["loss_lambda"], "lambda in the step weight w_t", minimum=0),
                "lambda_time": _prop(_NUM, _TRAIN_DEFAULTS["lambda_time"], "weight of the time-domain term", minimum=0),
                "lambda_freq": _prop(_NUM, _TRAIN_DEFAULTS["lambda_freq"], "weight of the frequency term", minimum=0),
                "batch_size": _prop(_INT, _TRAIN_DEFAULTS["batch_size"], "windows per step", minimum=1),
                "steps": _prop(_INT, _TRAIN_DEFAULTS["steps"], "optimizer steps", minimum=0),
                "lr": _prop(_NUM, _TRAIN_DEFAULTS["lr"], "peak learning rate", exclusiveMinimum=0),
                "warmup": _prop(_INT, _TRAIN_DEFAULTS["warmup"], "linear warmup steps", minimum=0),
                "adam_betas": _prop(
                    "array", _TRAIN_DEFAULTS["adam_betas"], "Adam moment decays", items={"type": _NUM}, minItems=2, maxItems=2
                ),
                "adam_eps": _prop(_NUM, _TRAIN_DEFAULTS["adam_eps"], "Adam epsilon", exclusiveMinimum=0),
                "lr_floor": _prop(_NUM, _TRAIN_DEFAULTS["lr_floor"], "final learning rate", minimum=0),
                "max_grad_norm": _prop([_NUM, "null"], None, "clip the global gradient norm"),
                "log_every": _prop(_INT, _TRAIN_DEFAULTS["log_every"], "log interval in steps", minimum=0),
                "smooth_window": _prop(_INT, _TRAIN_DEFAULTS["smooth_window"], "smoothed-loss window", minimum=1),
                "divergence_threshold": _prop(_NUM, _TRAIN_DEFAULTS["divergence_threshold"], "abort above this loss"),
                "checkpoint_every": _prop(_INT, 0, "checkpoint interval in steps (0: only at the end)", minimum=0),
            },
        },
        "sample": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": _prop(_INT, 100, "windows to generate", minimum=1),
                "chunk_size": _prop(_INT, 512, "windows per random sub-stream", minimum=1),
                "inference_steps": _prop(
                    [_INT, "null"], None, "reverse steps actually run (null: every step)", minimum=1
                ),
                "clip": _prop(
                    ["array", "null"],
                    None,
                    "bound clean-window estimates to [lo, hi] in data units (null: no bound)",
                    items={"type": _NUM},
                    minItems=2,
                    maxItems=2,
                ),
            },
        },
        "condition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": _prop("string", "guided", "guided | replace-only", enum=["guided", "replace-only"]),
                "missing_ratio": _prop(_NUM, 0.5, "impute: missing ratio r", exclusiveMinimum=0, exclusiveMaximum=1),
                "mean_missing_length": _prop(_NUM, 5.0, "impute: mean missing-run length", minimum=1),
                "horizon": _prop([_INT, "null"], None, "forecast: observed prefix length (default tau // 2)"),
                "eta": _prop([_NUM, "null"], None, "guidance step size (default 1e-2 * tau * d)", minimum=0),
                "gamma": _prop(_NUM, 0.05, "weight of the posterior-likelihood term", minimum=0),
                "budget": _prop([_INT, "null"], 200, "cap on gradient updates per trajectory"),
                "n_windows": _prop(_INT, 16, "held-out windows to condition on", minimum=1),
            },
        },
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_runs": _prop(_INT, 3, "repetitions of the learned scores", minimum=1),
                "iterations": _prop(_INT, 2000, "optimizer steps of the post-hoc networks", minimum=1),
                "bins": _prop(_INT, 50, "histogram bins for marginal_tv", minimum=1),
            },
        },
    },
}

_SECTIONS = ("dataset", "model", "train", "sample", "condition", "evaluate")


def config_keys() -> list[tuple[str, str, object]]:
    """Flattened ``(dotted key, description, default)`` for every config entry."""
    out = []
    for key, spec in CONFIG_SCHEMA["properties"].items():
        if key in _SECTIONS:
            for sub, s in spec["properties"].items():
                out.append((f"{key}.{sub}", s["description"], s["default"]))
        else:
            out.append((key, spec["description"], spec["default"]))
    return out


def default_config() -> dict:
    cfg = {}
    for key, spec in CONFIG_SCHEMA["properties"].items():
        if key in _SECTIONS:
            cfg[key] = {sub: copy.deepcopy(s["default"]) for sub, s in spec["properties"].items()}
        else:
            cfg[key] = spec["default"]
    return cfg


@dataclass
class RunConfig:
    seed: int
    output_dir: str | None
    dataset: dict
    model: DenoiserConfig
    train: TrainConfig
    train_extra: dict
    sample: dict
    condition: dict
    evaluate: dict

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        train.update(self.train_extra)
        model = self.model.to_dict()
        for k in ("seq_len", "n_channels"):
            model.pop(k)
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": dict(self.dataset),
            "model": model,
            "train": train,
            "sample": dict(self.sample),
            "condition": dict(self.condition),
            "evaluate": dict(self.evaluate),
        }


def parse_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    """Validate a config document against the schema and build typed sections."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  {'.'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n" + "\n".join(lines))
    cfg = default_config()
    for key, value in raw.items():
        if key in _SECTIONS:
            cfg[key].update(value)
        else:
            cfg[key] = value
    if seed_override is not None:
        cfg["seed"] = seed_override
    ds = cfg["dataset"]
    if ds["source"] in ("csv", "windows") and not ds["path"]:
        raise ConfigError(f"dataset.path is required for source {ds['source']!r}")
    extra = {"checkpoint_every": cfg["train"].pop("checkpoint_every")}
    try:
        model = DenoiserConfig(seq_len=ds["seq_len"], n_channels=ds["n_channels"], **cfg["model"])
        train_cfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return RunConfig(
        cfg["seed"], cfg["output_dir"], ds, model, train_cfg, extra, cfg["sample"], cfg["condition"], cfg["evaluate"]
    )


def load_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(raw, seed_override)


# --- files ---------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_windows(directory: Path, windows: np.ndarray, prefix: str = "window") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    header = [f"ch{c}" for c in range(windows.shape[2])]
    for i, w in enumerate(windows):
        write_grid_csv(directory / f"{prefix}_{i:05d}.csv", w, header, fmt="%.17g")


def read_windows(path) -> np.ndarray:
    """Stack every window CSV of a directory (or of its ``windows_subdir``)."""
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"not a directory: {path}")
    manifest = path / "manifest.json"
    if manifest.exists():
        sub = json.loads(manifest.read_text()).get("windows_subdir")
        if sub:
            path = path / sub
    files = sorted(path.glob("*.csv"))
    if not files:
        raise ConfigError(f"no window CSV files in {path}")
    grids = [read_grid_csv(f)[1] for f in files]
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise ConfigError(f"{path}: windows have different shapes {sorted(shapes)}")
    return np.stack(grids)


def _resolve_out(arg: str | None, cfg: RunConfig | None, command: str) -> Path:
    if arg:
        return Path(arg)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


# --- datasets ------------------------------------------------------------------


@dataclass
class Dataset:
    windows: np.ndarray
    normalizer: Normalizer | None
    components: dict[str, np.ndarray]


def build_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    rng = stream(cfg.seed, "data")
    tau, d = ds["seq_len"], ds["n_channels"]
    if ds["source"] == "sines":
        x = gen_sines(
            ds["n_windows"], tau, d, rng, f_lo=ds["f_lo"], f_hi=ds["f_hi"],
            bin_aligned=ds["bin_aligned"], shared=ds["shared"], lag=ds["lag"],
        )
        return Dataset(x, None, {})
    if ds["source"] == "trend-season":
        try:
            b = gen_trend_season(
                ds["n_windows"], tau, rng, n_channels=d, n_seasons=ds["n_seasons"], noise_std=ds["noise_std"]
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return Dataset(b.series, None, {"trend": b.trend, "season": b.season, "noise": b.noise})
    if ds["source"] == "csv":
        if not Path(ds["path"]).is_file():
            raise ConfigError(f"dataset file not found: {ds['path']}")
        try:
            x, norm = load_csv(ds["path"], tau, ds["stride"], ds["normalization"])
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if x.shape[2] != d:
            raise ConfigError(f"{ds['path']} has {x.shape[2]} channels, config says {d}")
        return Dataset(x, norm, {})
    x = read_windows(ds["path"])
    if x.shape[1:] != (tau, d):
        raise ConfigError(f"windows in {ds['path']} have shape {x.shape[1:]}, config says {(tau, d)}")
    return Dataset(x, None, {})


def split_dataset(cfg: RunConfig, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    frac = cfg.dataset["train_fraction"]
    if frac >= 1.0:
        return x, x
    return train_test_split(x, stream(cfg.seed, "data", 1), frac)


# --- commands ------------------------------------------------------------------


def cmd_gendata(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _resolve_out(args.out, None, "gendata")
    data = build_dataset(cfg)
    _write_windows(out / "windows", data.windows)
    for name, comp in data.components.items():
        _write_windows(out / name, comp)
    manifest = {
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "n_windows": int(len(data.windows)),
        "seq_len": int(data.windows.shape[1]),
        "n_channels": int(data.windows.shape[2]),
        "windows_subdir": "windows",
        "components": sorted(data.components),
        "normalization": data.normalizer.to_dict() if data.normalizer else {"kind": "minmax", "range": [0.0, 1.0]},
    }
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d windows to %s", len(data.windows), out)
    return 0


def _save(path: Path, model, cfg: RunConfig, step: int, opt: Adam, norm: Normalizer | None) -> None:
    extra = {"step": step, "run_config": cfg.to_dict(), "normalizer": norm.to_dict() if norm else None}
    save_checkpoint(path, model, extra=extra, optimizer_state=opt.state_arrays())


def _write_loss_csv(path: Path, history) -> None:
    with path.open("w") as fh:
        fh.write("step,raw_loss,smoothed_loss\n")
        for step, raw, smooth in history:
            fh.write(f"{step},{float(raw)!r},{float(smooth)!r}\n")


def _read_loss_csv(path: Path, upto: int) -> list[tuple[int, float, float]]:
    if not path.exists():
        return []
    rows = []
    for line in path.read_text().splitlines()[1:]:
        step, raw, smooth = line.split(",")
        if int(step) <= upto:
            rows.append((int(step), float(raw), float(smooth)))
    return rows


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _resolve_out(args.out, cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    data = build_dataset(cfg)
    train_x, _ = split_dataset(cfg, data.windows)
    sched = cosine_schedule(cfg.model.timesteps)

    start, history = 0, []
    model = init_params(cfg.model, int(stream(cfg.seed, "init").integers(2**63)))
    opt = Adam(model.params, cfg.train.adam_betas, cfg.train.adam_eps)
    if args.resume and ckpt.exists():
        model, meta = load_checkpoint(ckpt)
        if model.cfg != cfg.model:
            raise ConfigError("checkpoint model config differs from the run config; cannot resume")
        opt = Adam(model.params, cfg.train.adam_betas, cfg.train.adam_eps)
        state = load_optimizer_state(ckpt)
        if state is not None:
            opt.load_state_arrays(state)
        start = int(meta["extra"]["step"])
        history = _read_loss_csv(out / "loss.csv", start)
        log.info("resuming from step %d", start)
    log.info("model parameters: %d", model.n_params)

    every = cfg.train_extra["checkpoint_every"] or cfg.train.steps
    step = start
    if step == 0 or step >= cfg.train.steps:
        _save(ckpt, model, cfg, step, opt, data.normalizer)
    while step < cfg.train.steps:
        stop = min(step + every, cfg.train.steps)
        res = train(train_x, model, sched, cfg.train, optimizer=opt, start_step=step, stop_step=stop, history=history)
        history = res.history
        step = stop
        _save(ckpt, model, cfg, step, opt, data.normalizer)
        _write_loss_csv(out / "loss.csv", history)
    if not history:
        _write_loss_csv(out / "loss.csv", history)
    _write_json(
        out / "train_summary.json",
        {
            "n_params": model.n_params,
            "steps": cfg.train.steps,
            "final_smoothed_loss": history[-1][2] if history else None,
            "n_train_windows": int(len(train_x)),
            "run_config": cfg.to_dict(),
        },
    )
    return 0


def _load_model_for(cfg: RunConfig, path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        model, meta = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from err
    for key in ("seq_len", "n_channels", "timesteps"):
        if getattr(model.cfg, key) != getattr(cfg.model, key):
            raise ConfigError(
                f"checkpoint/config mismatch on {key}: {getattr(model.cfg, key)} vs {getattr(cfg.model, key)}"
            )
    return model, meta


def _chain(model, cfg: RunConfig):
    steps = cfg.sample["inference_steps"]
    if steps is not None and steps > model.cfg.timesteps:
        raise ConfigError(f"sample.inference_steps={steps} exceeds model.timesteps={model.cfg.timesteps}")
    return respaced(model, cosine_schedule(model.cfg.timesteps), steps)


def _clip(cfg: RunConfig):
    clip = cfg.sample["clip"]
    if clip is not None and not clip[0] < clip[1]:
        raise ConfigError(f"sample.clip must satisfy lo < hi, got {clip}")
    return None if clip is None else tuple(clip)


def _sample_chunk(args):
    path, n, seed, index, steps, clip = args
    model, _ = load_checkpoint(path)
    model, sched = respaced(model, cosine_schedule(model.cfg.timesteps), steps)
    return sample_chunk(model, sched, n, seed, index, clip)


def cmd_sample(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, _ = _load_model_for(cfg, args.checkpoint)
    out = _resolve_out(args.out, cfg, "sample")
    model, sched = _chain(model, cfg)
    clip = _clip(cfg)
    n, chunk = cfg.sample["n_samples"], cfg.sample["chunk_size"]
    if args.workers > 1:
        jobs = [
            (str(args.checkpoint), min(chunk, n - start), cfg.seed, i, cfg.sample["inference_steps"], clip)
            for i, start in enumerate(range(0, n, chunk))
        ]
        with ProcessPoolExecutor(args.workers) as pool:
            x = np.concatenate(list(pool.map(_sample_chunk, jobs)))
    else:
        x = sample_unconditional(model, sched, n, cfg.seed, chunk_size=chunk, clip=clip)
    _write_windows(out / "samples", x, prefix="sample")
    _write_json(
        out / "manifest.json",
        {"command": "sample", "n_samples": n, "seed": cfg.seed, "windows_subdir": "samples", "checkpoint": Path(args.checkpoint).name},
    )
    return 0


def _conditional(args, kind: str) -> int:
    cfg = load_config(args.config, args.seed)
    model, _ = _load_model_for(cfg, args.checkpoint)
    out = _resolve_out(args.out, cfg, kind)
    c = cfg.condition
    tau, d = cfg.model.seq_len, cfg.model.n_channels
    data = build_dataset(cfg)
    _, test_x = split_dataset(cfg, data.windows)
    targets = test_x[: c["n_windows"]]
    if kind == "impute":
        spec = MaskSpec("geometric", c["missing_ratio"], mean_missing_length=c["mean_missing_length"])
    else:
        horizon = tau // 2 if c["horizon"] is None else c["horizon"]
        if not 0 <= horizon <= tau:
            raise ConfigError(f"condition.horizon must be in [0, {tau}]")
        spec = MaskSpec("forecast", horizon=horizon)
    masks = gen_masks(spec, len(targets), tau, d, stream(cfg.seed, "mask"))
    cond = ConditionSpec(masks, targets, eta=c["eta"], gamma=c["gamma"], budget=c["budget"])
    model, sched = _chain(model, cfg)
    x = sample_conditional(model, sched, cond, seed=cfg.seed, mode=c["mode"], clip=_clip(cfg))

    _write_windows(out / "series", x)
    _write_windows(out / "targets", targets)
    header = [f"ch{i}" for i in range(d)]
    with (out / "pairs.csv").open("w") as fh:
        fh.write("window,time,channel,observed,target,output\n")
        for i in range(len(x)):
            for t in range(tau):
                for ch in range(d):
                    fh.write(f"{i},{t},{ch},{int(masks[i, t, ch])},{float(targets[i, t, ch])!r},{float(x[i, t, ch])!r}\n")
    if kind == "forecast":
        pred_dir = out / "predictions"
        pred_dir.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(x):
            write_grid_csv(pred_dir / f"window_{i:05d}.csv", w[spec.horizon :], header, fmt="%.17g")
    hidden = ~masks
    n_hidden = int(hidden.sum())
    mse = float(((x - targets)[hidden] ** 2).mean()) if n_hidden else None
    _write_json(
        out / "summary.json",
        {
            "command": kind,
            "mode": c["mode"],
            "masked_mse": mse,
            "n_target_coordinates": n_hidden,
            "n_windows": int(len(x)),
            "mask": {"kind": spec.kind, "missing_ratio": spec.missing_ratio, "horizon": spec.horizon,
                     "mean_missing_length": spec.mean_missing_length},
            "eta": c["eta"],
            "gamma": c["gamma"],
            "budget": c["budget"],
            "seed": cfg.seed,
            "windows_subdir": "series",
        },
    )
    _write_json(out / "manifest.json", {"command": kind, "windows_subdir": "series", "seed": cfg.seed})
    return 0


def cmd_impute(args) -> int:
    return _conditional(args, "impute")


def cmd_forecast(args) -> int:
    return _conditional(args, "forecast")


def cmd_evaluate(args) -> int:
    for flag, path in (("--real", args.real), ("--fake", args.fake)):
        if not Path(path).is_dir():
            raise ConfigError(f"{flag} directory not found: {path}")
    ev = default_config()["evaluate"]
    seed = 0
    if args.config:
        cfg = load_config(args.config, args.seed)
        ev, seed = cfg.evaluate, cfg.seed
    elif args.seed is not None:
        seed = args.seed
    real, fake = read_windows(args.real), read_windows(args.fake)
    if real.shape[1:] != fake.shape[1:]:
        raise ConfigError(f"shape mismatch: real windows {real.shape[1:]} vs fake windows {fake.shape[1:]}")
    report = evaluate(real, fake, seed=seed, n_runs=ev["n_runs"], iterations=ev["iterations"], bins=ev["bins"])
    doc = report.to_dict()
    jsonschema.validate(doc, json.loads(REPORT_SCHEMA_PATH.read_text()))
    out = Path(args.out)
    _write_json(out, doc)
    board = Path(args.leaderboard) if args.leaderboard else out.with_name("leaderboard.csv")
    append_leaderboard(board, report, run=f"{Path(args.fake).name}@{seed}")
    return 0


# --- parser --------------------------------------------------------------------


def _config_help() -> str:
    lines = ["config keys (JSON run config; unknown keys are rejected):"]
    for key, doc, default in config_keys():
        lines.append(f"  {key:<30} {doc} [default: {json.dumps(default)}]")
    lines.append("")
    lines.append(f"environment: {OUTPUT_ROOT_ENV} sets the default output root.")
    lines.append("exit codes: 0 success, 1 runtime failure, 2 usage or config error.")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    epilog = _config_help()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="tsdiffusion", description="Interpretable diffusion for time series.", epilog=epilog, formatter_class=fmt
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=fmt)
        p.add_argument("--config", required=name != "evaluate", help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
        p.set_defaults(func=func)
        return p

    p = add("gendata", cmd_gendata, "materialize a dataset as window CSVs plus a manifest")
    p.add_argument("--out", help="output directory")
    p = add("train", cmd_train, "train a denoiser; writes checkpoint.npz and loss.csv")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz if present")
    for name, func, text in (
        ("sample", cmd_sample, "unconditional generation"),
        ("impute", cmd_impute, "fill geometrically masked held-out windows"),
        ("forecast", cmd_forecast, "predict the continuation of held-out windows"),
    ):
        p = add(name, func, text)
        p.add_argument("--checkpoint", required=True, help="trained checkpoint")
        p.add_argument("--out", help="output directory")
        if name == "sample":
            p.add_argument("--workers", type=int, default=1, help="processes for independent sample chunks")
    p = add("evaluate", cmd_evaluate, "score fake windows against real ones")
    p.add_argument("--real", required=True, help="directory of real window CSVs")
    p.add_argument("--fake", required=True, help="directory of generated window CSVs")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--leaderboard", help="CSV to append a row to (default: next to the report)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * max(args.verbose, 1)
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FloatingPointError, RuntimeError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
