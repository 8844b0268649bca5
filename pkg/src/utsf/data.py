"""Dataset ingestion, jittered window sampling, normalization, masking, and
model-input assembly.

Everything here works on plain numpy arrays; values only become autodiff
tensors at the model boundary. Series are stored channels-major (C x length)
and every channel is treated as an independent univariate sequence.
"""

from __future__ import annotations

import csv
import json
import warnings
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, IngestionError, NumericError, UsageError
from .model import ModelConfig
from .tensor import Tensor

# below this the window is treated as flat and only centered, never scaled
SIGMA_FLOOR = 0.01

DEFAULT_SPLITS = (0.7, 0.1, 0.2)

_SPLIT_NAMES = ("train", "validate", "test")


@dataclass
class SeriesFrame:
    """A raw multivariate series with chronological train/validate/test tags.

    Parameters
    ----------
    dataset_id : str
        Identity used by the sampler and in metric rows.
    channel_names : list of str
    values : ndarray [C x length], float32
    splits : (train, validate, test) fractions summing to 1
    """

    dataset_id: str
    channel_names: list
    values: np.ndarray
    splits: tuple = DEFAULT_SPLITS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise IngestionError(f"series values must be 2-D (channels x time), got {self.values.shape}")
        if len(self.channel_names) != self.values.shape[0]:
            raise IngestionError(
                f"{len(self.channel_names)} channel names for {self.values.shape[0]} channels"
            )
        if not np.all(np.isfinite(self.values)):
            raise IngestionError(f"dataset '{self.dataset_id}' contains non-finite values")
        self.splits = tuple(float(s) for s in self.splits)
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1.0) > 1e-6:
            raise ConfigError(f"split fractions must be 3 nonnegative values summing to 1, got {self.splits}")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def split_bounds(self, split: str) -> tuple[int, int]:
        """[start, end) index range of one chronological split."""
        if split not in _SPLIT_NAMES:
            raise UsageError(f"unknown split '{split}' (have {_SPLIT_NAMES})")
        n_train = int(self.splits[0] * self.length)
        n_val = int(self.splits[1] * self.length)
        if split == "train":
            return 0, n_train
        if split == "validate":
            return n_train, n_train + n_val
        return n_train + n_val, self.length

    def split_values(self, split: str) -> np.ndarray:
        lo, hi = self.split_bounds(split)
        return self.values[:, lo:hi]


def load_csv_dataset(path, dataset_id: str, splits=DEFAULT_SPLITS) -> SeriesFrame:
    """Read a UTF-8 CSV with a header of channel names and one timestep per row.

    Rejects blank cells, unparsable or non-finite values, and ragged rows,
    naming the offending row (1-based, header = row 1) and column.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader]
    if len(rows) < 2:
        raise IngestionError(f"{path}: need a header row plus at least one data row, got {len(rows)} rows")
    header = [c.strip() for c in rows[0]]
    n_cols = len(header)
    data = np.empty((len(rows) - 1, n_cols), dtype=np.float32)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n_cols:
            raise IngestionError(f"{path}: row {r} has {len(row)} cells, header has {n_cols}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            col = header[c]
            if not cell:
                raise IngestionError(f"{path}: blank cell at row {r}, column '{col}'")
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: unparsable value '{cell}' at row {r}, column '{col}'") from None
            if not np.isfinite(v):
                raise IngestionError(f"{path}: non-finite value '{cell}' at row {r}, column '{col}'")
            data[r - 2, c] = v
    return SeriesFrame(dataset_id, header, data.T, splits)


def save_csv_dataset(frame: SeriesFrame, path) -> None:
    """Inverse of load_csv_dataset; 9 significant digits round-trip float32 exactly."""
    lines = [",".join(frame.channel_names)]
    for t in range(frame.length):
        lines.append(",".join(f"{v:.8e}" for v in frame.values[:, t]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_registry(path) -> dict[str, SeriesFrame]:
    """Load a JSON registry {dataset_id: {path, splits?}}; paths resolve
    relative to the registry file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"dataset registry not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"registry {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"registry {path} must be a JSON object")
    frames: dict[str, SeriesFrame] = {}
    for ds_id, entry in raw.items():
        if not isinstance(entry, dict):
            raise ConfigError(f"registry entry '{ds_id}' must be an object")
        unknown = set(entry) - {"path", "splits"}
        if unknown:
            raise ConfigError(f"registry entry '{ds_id}' has unknown keys: {sorted(unknown)}")
        if "path" not in entry:
            raise ConfigError(f"registry entry '{ds_id}' is missing 'path'")
        csv_path = path.parent / entry["path"]
        if not csv_path.exists():
            raise ConfigError(f"dataset '{ds_id}': file not found: {csv_path}")
        frames[ds_id] = load_csv_dataset(csv_path, ds_id, tuple(entry.get("splits", DEFAULT_SPLITS)))
    if not frames:
        raise ConfigError(f"registry {path} lists no datasets")
    return frames


# ---------------------------------------------------------------------------
# window sampling


@dataclass(frozen=True)
class SamplerConfig:
    """Stride and jitter policy for window enumeration."""

    stride: int = 1
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"sampler stride must be >= 1, got {self.stride}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "SamplerConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sampler config keys: {sorted(unknown)}")
        return cls(**raw)


def window_starts(usable_len: int, window_len: int, sampler: SamplerConfig,
                  epoch: int = 0, salt: int = 0) -> np.ndarray:
    """Window start offsets at stride tau with per-window jitter in [0, tau//2].

    The count is fixed at ((usable - window - tau//2) // tau) + 1 so every
    jittered start still fits; jitter is redrawn per epoch from a seeded
    stream, making enumeration a pure function of its arguments.
    """
    if window_len < 1:
        raise UsageError(f"window length must be >= 1, got {window_len}")
    tau = sampler.stride
    half = tau // 2
    n = (usable_len - window_len - half) // tau + 1 if usable_len >= window_len else 0
    if n <= 0:
        warnings.warn(f"no windows: length {window_len} does not fit in {usable_len} at stride {tau}")
        return np.zeros(0, dtype=np.int64)
    starts = np.arange(n, dtype=np.int64) * tau
    if sampler.jitter and half > 0:
        rng = np.random.default_rng((sampler.seed, epoch, salt))
        starts = starts + rng.integers(0, half + 1, size=n)
    return starts


def jittered_windows(frame: SeriesFrame, window_len: int, sampler: SamplerConfig,
                     split: str = "train", epoch: int = 0) -> np.ndarray:
    """Absolute start indices of windows lying fully inside one split."""
    lo, hi = frame.split_bounds(split)
    salt = zlib.crc32(frame.dataset_id.encode())
    return lo + window_starts(hi - lo, window_len, sampler, epoch, salt)


def weighted_sample(datasets: list, rng: np.random.Generator) -> str:
    """Pick a dataset id from [(dataset_id, window_count), ...].

    Each individual window carries weight 1/(X_d * D), so every dataset's
    total mass is exactly 1/D: realized as a uniform choice over datasets
    (the within-dataset window is drawn uniformly by the caller).
    """
    if not datasets:
        raise UsageError("weighted_sample over an empty dataset list")
    for ds_id, count in datasets:
        if count < 1:
            raise UsageError(f"dataset '{ds_id}' has no windows")
    return datasets[int(rng.integers(len(datasets)))][0]


# ---------------------------------------------------------------------------
# normalization


def normalize_sample(window) -> tuple[np.ndarray, float, float]:
    """Standardize a window by its own statistics, with a low-variance guard.

    Population sigma >= 0.01: returns (window - mu) / sigma. Below that the
    window is only centered, since dividing by a near-zero sigma would
    explode flat segments. Returns (normalized, mu, sigma) so the map inverts.
    """
    arr = np.asarray(window, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NumericError("normalize_sample input is not finite")
    mu = float(arr.mean(dtype=np.float64))
    sigma = float(arr.std(dtype=np.float64))
    return apply_normalization(arr, mu, sigma), mu, sigma


def apply_normalization(values, mu: float, sigma: float) -> np.ndarray:
    """Apply an already-computed (mu, sigma) pair under the same branch rule."""
    arr = np.asarray(values, dtype=np.float32)
    if sigma >= SIGMA_FLOOR:
        return ((arr - mu) / sigma).astype(np.float32)
    return (arr - mu).astype(np.float32)


def denormalize(values, mu: float, sigma: float) -> np.ndarray:
    """Exact inverse of apply_normalization on the branch sigma selects."""
    arr = np.asarray(values, dtype=np.float32)
    if sigma >= SIGMA_FLOOR:
        return (arr * sigma + mu).astype(np.float32)
    return (arr + mu).astype(np.float32)


# ---------------------------------------------------------------------------
# model-input assembly


def build_model_input(window, config: ModelConfig) -> np.ndarray:
    """Pad with copies of the last value, then pool to the model length.

    The horizon region is filled with horizon_len repeats of the final
    observation; adaptive average pooling then maps any input length onto
    the fixed token geometry (identity when lengths already agree).
    """
    arr = np.asarray(window, dtype=np.float32).reshape(1, -1)
    if arr.shape[1] < 1:
        raise UsageError("empty input window")
    pad = np.full((1, config.horizon_len), arr[0, -1], dtype=np.float32)
    padded = np.concatenate([arr, pad], axis=1)
    if padded.shape[1] == config.model_len:
        return padded
    return T.adaptive_avg_pool1d(Tensor(padded), config.model_len).data


def zero_mask_patches(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask selecting exactly floor(mask_ratio * n_patches) patches.

    Partial Fisher-Yates: after k swaps the prefix equals the first k
    entries of a full seeded shuffle, so selection is uniform without
    replacement and cheap for small ratios.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise UsageError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    # tiny nudge so decimal ratios land on their exact multiples (0.3 * 10 -> 3)
    k = int(np.floor(np.float64(mask_ratio) * n_patches + 1e-9))
    mask = np.zeros(n_patches, dtype=bool)
    if k == 0:
        return mask
    idx = np.arange(n_patches)
    for i in range(k):
        j = int(rng.integers(i, n_patches))
        idx[i], idx[j] = idx[j], idx[i]
    mask[idx[:k]] = True
    return mask


def mask_series(series, mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Zero out whole patches of a (1, n*patch_size) series; returns a copy."""
    arr = np.array(series, dtype=np.float32, copy=True)
    n = len(mask)
    if arr.shape != (1, n * patch_size):
        raise UsageError(f"series shape {arr.shape} does not match {n} patches of size {patch_size}")
    arr.reshape(n, patch_size)[mask] = 0.0
    return arr


@dataclass
class WindowSample:
    """One normalized (input, target) pair with its restore statistics."""

    input: np.ndarray   # [1, L] normalized
    target: np.ndarray  # [1, T] normalized with the input window's stats
    mu: float
    sigma: float
    dataset_id: str
    channel: int
    start: int


def make_window_sample(frame: SeriesFrame, channel: int, start: int,
                       lookback_len: int, horizon_len: int) -> WindowSample:
    """Cut a contiguous lookback+horizon segment; both parts share the
    input window's (mu, sigma) so the target stays invertible."""
    end = start + lookback_len + horizon_len
    if start < 0 or end > frame.length:
        raise UsageError(f"window [{start}, {end}) outside series of length {frame.length}")
    seg = frame.values[channel, start:end]
    raw_input = seg[:lookback_len].reshape(1, -1)
    raw_target = seg[lookback_len:].reshape(1, -1)
    norm_input, mu, sigma = normalize_sample(raw_input)
    norm_target = apply_normalization(raw_target, mu, sigma)
    return WindowSample(norm_input, norm_target, mu, sigma, frame.dataset_id, channel, start)


# ---------------------------------------------------------------------------
# synthetic generators


def make_sine_frame(dataset_id: str, length: int, n_channels: int = 1,
                    period: float = 64.0, amplitude: float = 1.0, phase: float = 0.0,
                    noise: float = 0.0, seed: int = 0, splits=DEFAULT_SPLITS) -> SeriesFrame:
    """Sinusoid dataset; channels are phase-shifted copies of one wave."""
    t = np.arange(length, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(n_channels):
        row = amplitude * np.sin(2.0 * np.pi * t / period + phase + c * np.pi / 4.0)
        if noise > 0.0:
            row = row + rng.normal(0.0, noise, size=length)
        rows.append(row)
    names = [f"sine{c}" for c in range(n_channels)]
    return SeriesFrame(dataset_id, names, np.stack(rows), splits)


def make_log_frame(dataset_id: str, length: int, n_channels: int = 1,
                   scale: float = 1.0, noise: float = 0.0, seed: int = 0,
                   splits=DEFAULT_SPLITS) -> SeriesFrame:
    """Slowly saturating log-trend dataset, one constant offset per channel."""
    t = np.arange(length, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(n_channels):
        row = scale * np.log1p(t) + float(c)
        if noise > 0.0:
            row = row + rng.normal(0.0, noise, size=length)
        rows.append(row)
    names = [f"log{c}" for c in range(n_channels)]
    return SeriesFrame(dataset_id, names, np.stack(rows), splits)
