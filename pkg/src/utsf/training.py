"""Two-stage optimization (masked reconstruction, then frozen-backbone
forecasting), evaluation metrics, and binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .errors import CheckpointError, ConfigError, NumericError, UsageError
from .model import LinearBaseline, ModelConfig, UShapedTransformer
from .tensor import GradTape, Tensor

MAPE_FLOOR = 0.1
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-4
    epochs: int = 1
    steps_per_epoch: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError(f"lr and eps must be positive, got {self.lr}, {self.eps}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainerConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**raw)


def compute_metrics(pred, truth, mape_floor: float = MAPE_FLOOR) -> dict:
    """MSE, MAE, and floored MAPE = mean(|y - yhat| / max(|y|, floor)).

    The floor keeps MAPE finite in normalized space where truth crosses zero.
    """
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise UsageError(f"metric shapes differ: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise UsageError("metrics need at least one element")
    err = p - y
    return {
        "mse": float(np.mean(err ** 2)),
        "mae": float(np.mean(np.abs(err))),
        "mape": float(np.mean(np.abs(err) / np.maximum(np.abs(y), mape_floor))),
    }


class Adam:
    """Adam with bias correction over a ParameterStore; frozen entries are
    never touched, whatever their gradients."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg: TrainerConfig) -> "Adam":
        return cls(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if self.params.frozen(name):
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainReport:
    """Per-step and per-epoch loss series plus evaluation metrics.

    Wall-clock is kept in memory for logging but never serialized, so two
    runs with one seed emit byte-identical files.
    """

    def __init__(self):
        self.steps: list[float] = []
        self.epoch_means: list[float] = []
        self.wall_clock: list[float] = []
        self.metrics: dict = {}

    def add_step(self, loss: float) -> None:
        self.steps.append(float(loss))

    def close_epoch(self, n_steps: int, seconds: float) -> float:
        mean = float(np.mean(self.steps[-n_steps:]))
        self.epoch_means.append(mean)
        self.wall_clock.append(seconds)
        return mean

    def loss_csv_text(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i},{v:.8e}" for i, v in enumerate(self.steps)]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        out = {
            "n_steps": len(self.steps),
            "epoch_mean_loss": [round(v, 10) for v in self.epoch_means],
            "final_loss": round(self.steps[-1], 10) if self.steps else None,
        }
        if self.metrics:
            out["metrics"] = self.metrics
        return out

    def json_text(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# epoch loops


def _window_table(frames: dict, window_len: int, sampler: D.SamplerConfig,
                  split: str, epoch: int) -> dict:
    table = {}
    for ds_id in sorted(frames):
        starts = D.jittered_windows(frames[ds_id], window_len, sampler, split, epoch)
        if len(starts):
            table[ds_id] = starts
    if not table:
        raise ConfigError(f"no '{split}' windows of length {window_len} in any dataset")
    return table


def _mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = T.sub(pred, target)
    return T.mean_all(T.mul(diff, diff))


def pretrain_epoch(model: UShapedTransformer, frames: dict, sampler: D.SamplerConfig,
                   optimizer: Adam, steps: int, rng: np.random.Generator,
                   epoch: int = 0, report: TrainReport | None = None,
                   split: str = "train") -> TrainReport:
    """Masked-reconstruction epoch: full-length windows, zero-masked patches,
    MSE against the unmasked source over all patches, updates to everything."""
    report = report if report is not None else TrainReport()
    cfg = model.config
    table = _window_table(frames, cfg.model_len, sampler, split, epoch)
    counts = [(ds_id, len(table[ds_id])) for ds_id in sorted(table)]
    t0 = time.perf_counter()
    for step in range(steps):
        try:
            ds_id = D.weighted_sample(counts, rng)
            frame = frames[ds_id]
            starts = table[ds_id]
            start = int(starts[int(rng.integers(len(starts)))])
            channel = int(rng.integers(frame.n_channels))
            raw = frame.values[channel, start:start + cfg.model_len].reshape(1, -1)
            source, _, _ = D.normalize_sample(raw)
            mask = D.zero_mask_patches(cfg.n_patches, cfg.mask_ratio, rng)
            masked = D.mask_series(source, mask, cfg.patch_size)
            model.params.zero_grads()
            with GradTape() as tape:
                pred, _ = model.reconstruct(Tensor(masked))
                loss = _mse_loss(pred, Tensor(source))
            tape.backward(loss)
            optimizer.step()
            report.add_step(loss.item())
        except NumericError as e:
            raise NumericError(f"pretrain aborted at epoch {epoch}, step {step}: {e}") from e
    report.close_epoch(steps, time.perf_counter() - t0)
    return report


def finetune_epoch(model: UShapedTransformer, frames: dict, sampler: D.SamplerConfig,
                   optimizer: Adam, steps: int, rng: np.random.Generator,
                   epoch: int = 0, report: TrainReport | None = None,
                   split: str = "train") -> TrainReport:
    """Forecast epoch over a frozen backbone: lookback windows padded with
    last-value repeats, MSE against the normalized horizon, head-only updates."""
    unfrozen = [n for n in model.backbone_names() if not model.params.frozen(n)]
    if unfrozen:
        raise ConfigError(f"finetune requires a frozen backbone; unfrozen: {unfrozen[:4]}")
    report = report if report is not None else TrainReport()
    cfg = model.config
    total = cfg.lookback_len + cfg.horizon_len
    table = _window_table(frames, total, sampler, split, epoch)
    counts = [(ds_id, len(table[ds_id])) for ds_id in sorted(table)]
    t0 = time.perf_counter()
    for step in range(steps):
        try:
            ds_id = D.weighted_sample(counts, rng)
            frame = frames[ds_id]
            starts = table[ds_id]
            start = int(starts[int(rng.integers(len(starts)))])
            channel = int(rng.integers(frame.n_channels))
            sample = D.make_window_sample(frame, channel, start, cfg.lookback_len, cfg.horizon_len)
            model_input = D.build_model_input(sample.input, cfg)
            model.params.zero_grads()
            with GradTape() as tape:
                pred, _ = model.forecast(Tensor(model_input))
                loss = _mse_loss(pred, Tensor(sample.target))
            tape.backward(loss)
            optimizer.step()
            report.add_step(loss.item())
        except NumericError as e:
            raise NumericError(f"finetune aborted at epoch {epoch}, step {step}: {e}") from e
    report.close_epoch(steps, time.perf_counter() - t0)
    return report


# ---------------------------------------------------------------------------
# evaluation


class ModelPredictor:
    """Normalized-space forecast via the full model."""

    def __init__(self, model: UShapedTransformer):
        self.model = model

    def __call__(self, input_norm: np.ndarray, truth_norm: np.ndarray) -> np.ndarray:
        x = D.build_model_input(input_norm, self.model.config)
        pred, _ = self.model.forecast(Tensor(x))
        return pred.data


class BaselinePredictor:
    def __init__(self, baseline: LinearBaseline):
        self.baseline = baseline

    def __call__(self, input_norm, truth_norm):
        return self.baseline.forward(Tensor(input_norm)).data


class LastValuePredictor:
    """Repeats the final observed value across the horizon."""

    def __init__(self, horizon_len: int):
        self.horizon_len = horizon_len

    def __call__(self, input_norm, truth_norm):
        return np.full((1, self.horizon_len), input_norm[0, -1], dtype=np.float32)


class OraclePredictor:
    """Returns the truth; pins the all-zero-metrics end of the harness."""

    def __call__(self, input_norm, truth_norm):
        return np.array(truth_norm, copy=True)


def evaluate(predict, frame: D.SeriesFrame, lookback_len: int, horizon_len: int,
             horizons, stride: int | None = None, split: str = "test") -> dict:
    """Fixed-stride windows over one split; metrics on the first h forecast
    values per horizon h, all in normalized space.

    ``predict(input_norm, truth_norm) -> pred_norm`` with shapes [1xL],
    [1xT] -> [1xT]; honest predictors ignore the truth argument.
    """
    horizons = [int(h) for h in horizons]
    for h in horizons:
        if h < 1 or h > horizon_len:
            raise UsageError(f"horizon {h} outside 1..{horizon_len}")
    total = lookback_len + horizon_len
    stride = total if stride is None else int(stride)
    if stride < 1:
        raise UsageError(f"evaluation stride must be >= 1, got {stride}")
    lo, hi = frame.split_bounds(split)
    starts = list(range(lo, hi - total + 1, stride))
    if not starts:
        raise UsageError(
            f"split '{split}' of '{frame.dataset_id}' is too short for one "
            f"window: {hi - lo} < {total}"
        )
    preds, truths = [], []
    for channel in range(frame.n_channels):
        for start in starts:
            sample = D.make_window_sample(frame, channel, start, lookback_len, horizon_len)
            pred = np.asarray(predict(sample.input, sample.target))
            if pred.shape != (1, horizon_len):
                raise UsageError(f"predictor returned shape {pred.shape}, expected (1, {horizon_len})")
            preds.append(pred[0])
            truths.append(sample.target[0])
    pred_mat = np.stack(preds)
    truth_mat = np.stack(truths)
    out = {}
    for h in horizons:
        out[h] = compute_metrics(pred_mat[:, :h], truth_mat[:, :h])
        out[h]["n_windows"] = len(preds)
    return out


def train_linear_baseline(baseline: LinearBaseline, frames: dict, sampler: D.SamplerConfig,
                          trainer_cfg: TrainerConfig, rng: np.random.Generator,
                          split: str = "train") -> TrainReport:
    """Fit the affine baseline with the same sampling scheme and step budget
    the model's head gets, for a like-for-like comparison row."""
    optimizer = Adam.from_config(baseline.params, trainer_cfg)
    report = TrainReport()
    L, H = baseline.lookback_len, baseline.horizon_len
    for epoch in range(trainer_cfg.epochs):
        table = _window_table(frames, L + H, sampler, split, epoch)
        counts = [(ds_id, len(table[ds_id])) for ds_id in sorted(table)]
        t0 = time.perf_counter()
        for step in range(trainer_cfg.steps_per_epoch):
            ds_id = D.weighted_sample(counts, rng)
            frame = frames[ds_id]
            starts = table[ds_id]
            start = int(starts[int(rng.integers(len(starts)))])
            channel = int(rng.integers(frame.n_channels))
            sample = D.make_window_sample(frame, channel, start, L, H)
            baseline.params.zero_grads()
            with GradTape() as tape:
                pred = baseline.forward(Tensor(sample.input))
                loss = _mse_loss(pred, Tensor(sample.target))
            tape.backward(loss)
            optimizer.step()
            report.add_step(loss.item())
        report.close_epoch(trainer_cfg.steps_per_epoch, time.perf_counter() - t0)
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: UShapedTransformer, path, seed: int = 0) -> None:
    """Length-prefixed JSON manifest followed by the raw little-endian
    float32 payload, parameters laid out in manifest order."""
    entries = []
    chunks = []
    for name, p in model.params.items():
        entries.append({"name": name, "shape": list(p.shape), "frozen": model.params.frozen(name)})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": entries,
        "seed": int(seed),
    }
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(struct.pack("<Q", len(mjson)) + mjson + b"".join(chunks))


def _parse_checkpoint(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated before the manifest length")
    (mlen,) = struct.unpack_from("<Q", blob)
    if 8 + mlen > len(blob):
        raise CheckpointError(f"{path}: manifest length {mlen} overruns the file")
    try:
        manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from None
    for field in ("format_version", "config", "params", "seed"):
        if field not in manifest:
            raise CheckpointError(f"{path}: manifest is missing field '{field}'")
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {manifest['format_version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    payload = blob[8 + mlen:]
    expected = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["params"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest implies {expected}")
    return manifest, payload


def _fill_params(model: UShapedTransformer, manifest: dict, payload: bytes, path) -> None:
    names = model.params.names()
    entries = manifest["params"]
    if len(entries) != len(names):
        raise CheckpointError(f"{path}: checkpoint has {len(entries)} parameters, model has {len(names)}")
    offset = 0
    for entry, name in zip(entries, names):
        if entry["name"] != name:
            raise CheckpointError(f"{path}: parameter mismatch: checkpoint '{entry['name']}', model '{name}'")
        p = model.params[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(
                f"{path}: parameter '{name}': checkpoint shape {shape} != model shape {p.shape}"
            )
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        p.data = arr.astype(p.data.dtype).copy()
        model.params.set_frozen(name, bool(entry["frozen"]))
        offset += 4 * count
    model.params.zero_grads()


def load_checkpoint(path) -> tuple[UShapedTransformer, dict]:
    """Rebuild a model from the checkpoint's own embedded config."""
    manifest, payload = _parse_checkpoint(path)
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except ConfigError as e:
        raise CheckpointError(f"{path}: manifest field 'config': {e}") from None
    model = UShapedTransformer(config, seed=int(manifest["seed"]))
    _fill_params(model, manifest, payload, path)
    return model, manifest


def apply_checkpoint(model: UShapedTransformer, path) -> dict:
    """Load a checkpoint into an existing model; the first parameter whose
    name or shape disagrees is named in the error."""
    manifest, payload = _parse_checkpoint(path)
    _fill_params(model, manifest, payload, path)
    return manifest


def backbone_hash(model: UShapedTransformer) -> str:
    """SHA-256 over the byte content of every non-head parameter."""
    h = hashlib.sha256()
    for name in model.backbone_names():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()
