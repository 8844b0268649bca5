"""U-shaped transformer over patch tokens, with a linear forecasting baseline.

The backbone stacks pre-norm transformer groups in a U: the encoder halves
the token count (and doubles the token dimension) after each group via a
learnable stride-2 merge, a shared bottleneck group sits at the deepest
level, and the decoder mirrors the tower with transpose-convolution splits.
Each decoder level receives the same-resolution encoder group output by
elementwise addition, and the final output adds the first encoder input, so
fine-grained content reaches the heads without passing through the deep
levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; token count N = (L + T) / patch_size."""

    lookback_len: int
    horizon_len: int
    patch_size: int
    patch_stride: int | None = None
    d_model: int = 64
    n_levels: int = 3
    n_layers_per_group: int = 1
    n_heads: int = 4
    mask_ratio: float = 0.4
    ffn_mult: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.patch_stride is None:
            object.__setattr__(self, "patch_stride", self.patch_size)
        if min(self.lookback_len, self.horizon_len, self.patch_size, self.d_model,
               self.n_levels, self.n_layers_per_group, self.n_heads, self.ffn_mult) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.patch_stride != self.patch_size:
            raise ConfigError("patch_stride must equal patch_size (non-overlapping patches only)")
        total = self.lookback_len + self.horizon_len
        if total % self.patch_size != 0:
            raise ConfigError(f"L + T = {total} is not divisible by patch_size {self.patch_size}")
        n = total // self.patch_size
        if n % (1 << (self.n_levels - 1)) != 0:
            raise ConfigError(f"{n} tokens cannot be halved {self.n_levels - 1} times")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is accepted for form but only rate 0 is implemented")

    @property
    def n_patches(self) -> int:
        return (self.lookback_len + self.horizon_len) // self.patch_size

    @property
    def model_len(self) -> int:
        return self.n_patches * self.patch_size

    def level_shape(self, level: int) -> tuple[int, int]:
        """(token count, token dimension) at a resolution level, 1-based."""
        if not 1 <= level <= self.n_levels:
            raise UsageError(f"level {level} outside 1..{self.n_levels}")
        return self.n_patches >> (level - 1), self.d_model << (level - 1)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        preset_name = raw.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if preset_name is not None:
            return replace(preset(preset_name), **raw)
        return cls(**raw)


_PRESETS = {
    # Table-style presets: lookback, horizon, patch geometry; the rest are
    # the architecture defaults this implementation fixes.
    "small": dict(lookback_len=512, horizon_len=1024, patch_size=32),
    "base": dict(lookback_len=3072, horizon_len=1024, patch_size=32),
    # tiny is for verification: 8 tokens, 2 levels, cheap finite differences
    "tiny": dict(lookback_len=32, horizon_len=32, patch_size=8,
                 d_model=8, n_levels=2, n_heads=2),
}


def preset(name: str) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset '{name}' (have {sorted(_PRESETS)})")
    return ModelConfig(**_PRESETS[name])


@dataclass
class PatchGrid:
    """Token tensor at one resolution level (tokens: P_level x D_level)."""

    tokens: Tensor
    level: int


@dataclass
class AttentionMap:
    """Head-averaged P x P row-stochastic attention weights of one group."""

    level: int
    side: str  # "enc" or "dec"; the bottleneck reports as enc at the deepest level
    weights: np.ndarray


class ParameterStore:
    """Named learnable tensors with per-parameter frozen flags.

    Iteration order is insertion order, which is the checkpoint payload
    order. Frozen parameters are skipped by the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._frozen[name] = False
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, flag: bool) -> None:
        if name not in self._params:
            raise UsageError(f"no parameter '{name}'")
        self._frozen[name] = flag

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if not self._frozen[n])

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class UShapedTransformer:
    """The backbone plus reconstruction and forecast heads.

    Channel handling is channel-independent: every series channel passes
    through the same weights as a univariate sequence of shape (1, L + T).
    """

    HEAD_PREFIX = "head."

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params = ParameterStore()
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params.add(name, Tensor(arr, requires_grad=True, dtype=self.dtype))

    def _add_linear(self, rng, name: str, d_in: int, d_out: int) -> None:
        self._add(f"{name}.w", _uniform_fan_in(rng, (d_in, d_out), d_in, self.dtype))
        self._add(f"{name}.b", _uniform_fan_in(rng, (d_out,), d_in, self.dtype))

    def _add_layer(self, rng, prefix: str, d: int) -> None:
        self._add(f"{prefix}.ln1.g", np.ones(d, dtype=self.dtype))
        self._add(f"{prefix}.ln1.b", np.zeros(d, dtype=self.dtype))
        for proj in ("q", "k", "v", "o"):
            self._add_linear(rng, f"{prefix}.attn.{proj}", d, d)
        self._add(f"{prefix}.ln2.g", np.ones(d, dtype=self.dtype))
        self._add(f"{prefix}.ln2.b", np.zeros(d, dtype=self.dtype))
        self._add_linear(rng, f"{prefix}.ffn.fc1", d, self.config.ffn_mult * d)
        self._add_linear(rng, f"{prefix}.ffn.fc2", self.config.ffn_mult * d, d)

    def _add_group(self, rng, prefix: str, d: int) -> None:
        for j in range(self.config.n_layers_per_group):
            self._add_layer(rng, f"{prefix}.layer{j}", d)

    def _build(self, rng) -> None:
        cfg = self.config
        # embedding: pointwise conv patch_size -> d_model, plus position table
        self._add("embed.w", _uniform_fan_in(rng, (cfg.d_model, cfg.patch_size), cfg.patch_size, self.dtype))
        self._add("embed.b", _uniform_fan_in(rng, (cfg.d_model,), cfg.patch_size, self.dtype))
        self._add("pos", (rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.d_model))).astype(self.dtype))
        for i in range(1, cfg.n_levels):
            d = cfg.d_model << (i - 1)
            self._add_group(rng, f"enc{i}", d)
            # merge level i -> i+1: conv weight [2d, d, 2]
            self._add(f"merge{i}.w", _uniform_fan_in(rng, (2 * d, d, 2), 2 * d, self.dtype))
            self._add(f"merge{i}.b", _uniform_fan_in(rng, (2 * d,), 2 * d, self.dtype))
        d_deep = cfg.d_model << (cfg.n_levels - 1)
        self._add_group(rng, "mid", d_deep)
        for i in range(cfg.n_levels - 1, 0, -1):
            d = cfg.d_model << (i - 1)
            # split level i+1 -> i: transpose conv weight [2d, d, 2]
            self._add(f"split{i}.w", _uniform_fan_in(rng, (2 * d, d, 2), 2 * d, self.dtype))
            self._add(f"split{i}.b", _uniform_fan_in(rng, (d,), 2 * d, self.dtype))
            self._add_group(rng, f"dec{i}", d)
        self._add_linear(rng, "head.recon", cfg.d_model, cfg.patch_size)
        self._add_linear(rng, "head.forecast", cfg.d_model, cfg.patch_size)

    # -- freezing ------------------------------------------------------------

    def backbone_names(self) -> list[str]:
        return [n for n in self.params.names() if not n.startswith(self.HEAD_PREFIX)]

    def freeze_backbone(self) -> None:
        for name in self.params.names():
            self.params.set_frozen(name, not name.startswith(self.HEAD_PREFIX))

    def unfreeze_all(self) -> None:
        for name in self.params.names():
            self.params.set_frozen(name, False)

    # -- forward pieces ------------------------------------------------------

    def patch_embed(self, series: Tensor) -> PatchGrid:
        """Cut a (1, N*patch_size) series into N patches, project, add positions."""
        cfg = self.config
        if series.ndim != 2 or series.shape[0] != 1:
            raise DimensionError(f"patch_embed expects a (1, length) series, got {series.shape}")
        length = series.shape[1]
        if length % cfg.patch_size != 0:
            raise DimensionError(f"series length {length} not divisible by patch_size {cfg.patch_size}")
        if length != cfg.model_len:
            raise DimensionError(f"series length {length} != model length {cfg.model_len}; "
                                 "pad and pool the window first")
        patches = T.transpose(T.reshape(series, (cfg.n_patches, cfg.patch_size)), (1, 0))
        embedded = T.transpose(T.pointwise_conv(patches, self.params["embed.w"], self.params["embed.b"]), (1, 0))
        tokens = T.add(embedded, self.params["pos"])
        return PatchGrid(tokens, level=1)

    def _attention(self, x: Tensor, prefix: str) -> tuple[Tensor, np.ndarray]:
        p, heads = self.params, self.config.n_heads
        n_tok, d = x.shape
        dh = d // heads
        q = T.add(T.matmul(x, p[f"{prefix}.attn.q.w"]), p[f"{prefix}.attn.q.b"])
        k = T.add(T.matmul(x, p[f"{prefix}.attn.k.w"]), p[f"{prefix}.attn.k.b"])
        v = T.add(T.matmul(x, p[f"{prefix}.attn.v.w"]), p[f"{prefix}.attn.v.b"])
        qh = T.transpose(T.reshape(q, (n_tok, heads, dh)), (1, 0, 2))
        kt = T.transpose(T.reshape(k, (n_tok, heads, dh)), (1, 2, 0))
        vh = T.transpose(T.reshape(v, (n_tok, heads, dh)), (1, 0, 2))
        weights = T.softmax_lastdim(T.mul(T.matmul(qh, kt), 1.0 / np.sqrt(dh)))
        ctx = T.reshape(T.transpose(T.matmul(weights, vh), (1, 0, 2)), (n_tok, d))
        out = T.add(T.matmul(ctx, p[f"{prefix}.attn.o.w"]), p[f"{prefix}.attn.o.b"])
        return out, weights.data.mean(axis=0)

    def _layer(self, x: Tensor, prefix: str) -> tuple[Tensor, np.ndarray]:
        p = self.params
        h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        attn_out, attn_weights = self._attention(h, prefix)
        x = T.add(x, attn_out)
        h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = T.add(T.matmul(h, p[f"{prefix}.ffn.fc1.w"]), p[f"{prefix}.ffn.fc1.b"])
        h = T.add(T.matmul(T.gelu(h), p[f"{prefix}.ffn.fc2.w"]), p[f"{prefix}.ffn.fc2.b"])
        return T.add(x, h), attn_weights

    def _group(self, x: Tensor, prefix: str) -> tuple[Tensor, np.ndarray]:
        first_weights = None
        for j in range(self.config.n_layers_per_group):
            x, w = self._layer(x, f"{prefix}.layer{j}")
            if first_weights is None:
                first_weights = w
        return x, first_weights

    def group_ids(self) -> list[str]:
        n = self.config.n_levels
        return [f"enc{i}" for i in range(1, n)] + ["mid"] + [f"dec{i}" for i in range(n - 1, 0, -1)]

    def transformer_group_forward(self, grid: PatchGrid, group_id: str) -> tuple[PatchGrid, AttentionMap]:
        """Run one named group; the map is the first layer's head average."""
        if group_id not in self.group_ids():
            raise UsageError(f"unknown group '{group_id}' (have {self.group_ids()})")
        level = self.config.n_levels if group_id == "mid" else int(group_id[3:])
        side = "dec" if group_id.startswith("dec") else "enc"
        out, weights = self._group(grid.tokens, group_id)
        return PatchGrid(out, grid.level), AttentionMap(level=level, side=side, weights=weights)

    def patch_merge(self, grid: PatchGrid) -> PatchGrid:
        """Halve tokens / double dimension with a learned stride-2 conv."""
        if grid.level >= self.config.n_levels:
            raise UsageError(f"no merge below level {grid.level}")
        p = self.params
        x = T.transpose(grid.tokens, (1, 0))  # channels = token dim
        x = T.conv1d_k2s2(x, p[f"merge{grid.level}.w"], p[f"merge{grid.level}.b"])
        return PatchGrid(T.transpose(x, (1, 0)), grid.level + 1)

    def patch_split(self, grid: PatchGrid) -> PatchGrid:
        """Double tokens / halve dimension with a learned transpose conv."""
        if grid.level <= 1:
            raise UsageError("no split above level 1")
        p = self.params
        x = T.transpose(grid.tokens, (1, 0))
        x = T.conv_transpose1d_k2s2(x, p[f"split{grid.level - 1}.w"], p[f"split{grid.level - 1}.b"])
        return PatchGrid(T.transpose(x, (1, 0)), grid.level - 1)

    def backbone_forward(self, grid: PatchGrid, zero_decoder: bool = False) -> tuple[PatchGrid, list[AttentionMap]]:
        """Encoder tower, bottleneck, decoder tower with summed skips.

        ``zero_decoder`` replaces the whole decoder path with a zero
        function (verification hook): the output then equals the first
        encoder group's input exactly.
        """
        cfg = self.config
        maps: list[AttentionMap] = []
        first_input = grid.tokens
        skips: list[Tensor] = []
        x = grid.tokens
        level = grid.level
        if level != 1:
            raise UsageError(f"backbone_forward starts at level 1, got {level}")
        for i in range(1, cfg.n_levels):
            out, w = self._group(x, f"enc{i}")
            maps.append(AttentionMap(level=i, side="enc", weights=w))
            skips.append(out)
            x = self.patch_merge(PatchGrid(out, i)).tokens
        x, w = self._group(x, "mid")
        maps.append(AttentionMap(level=cfg.n_levels, side="enc", weights=w))
        if zero_decoder:
            x = Tensor(np.zeros_like(first_input.data))
        else:
            for i in range(cfg.n_levels - 1, 0, -1):
                x = self.patch_split(PatchGrid(x, i + 1)).tokens
                x = T.add(x, skips[i - 1])
                x, w = self._group(x, f"dec{i}")
                maps.append(AttentionMap(level=i, side="dec", weights=w))
        out_tokens = T.add(x, first_input)
        return PatchGrid(out_tokens, level=1), maps

    def reconstruction_head(self, grid: PatchGrid) -> Tensor:
        """Map each token back to patch_size values and restitch the sequence."""
        p = self.params
        vals = T.add(T.matmul(grid.tokens, p["head.recon.w"]), p["head.recon.b"])
        return T.reshape(vals, (1, self.config.model_len))

    def forecast_head(self, grid: PatchGrid) -> Tensor:
        """De-embed to the full model length, return the final T values."""
        cfg = self.config
        p = self.params
        vals = T.add(T.matmul(grid.tokens, p["head.forecast.w"]), p["head.forecast.b"])
        seq = T.reshape(vals, (1, cfg.model_len))
        return T.narrow(seq, 1, cfg.model_len - cfg.horizon_len, cfg.horizon_len)

    # -- end-to-end passes ---------------------------------------------------

    def reconstruct(self, series: Tensor) -> tuple[Tensor, list[AttentionMap]]:
        grid, maps = self.backbone_forward(self.patch_embed(series))
        return self.reconstruction_head(grid), maps

    def forecast(self, series: Tensor) -> tuple[Tensor, list[AttentionMap]]:
        grid, maps = self.backbone_forward(self.patch_embed(series))
        return self.forecast_head(grid), maps


def patch_merge_naive(grid: PatchGrid) -> PatchGrid:
    """Parameter-free merge: stack the sequence halves as channel blocks.

    Output token t is token_t next to token_{t + P/2} -- tokens that are
    not temporal neighbours, which is the weakness the learnable merge
    exists to fix.
    """
    n_tok = grid.tokens.shape[0]
    if n_tok % 2 != 0:
        raise DimensionError(f"naive merge needs an even token count, got {n_tok}")
    half = n_tok // 2
    first = T.narrow(grid.tokens, 0, 0, half)
    second = T.narrow(grid.tokens, 0, half, half)
    return PatchGrid(T.concat([first, second], axis=1), grid.level + 1)


class LinearBaseline:
    """One shared affine map from L inputs to T outputs per channel."""

    def __init__(self, lookback_len: int, horizon_len: int, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.lookback_len = lookback_len
        self.horizon_len = horizon_len
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        self.params.add("w", Tensor(_uniform_fan_in(rng, (lookback_len, horizon_len), lookback_len, np.dtype(dtype)), requires_grad=True))
        self.params.add("b", Tensor(np.zeros(horizon_len, dtype=dtype), requires_grad=True))

    def forward(self, window: Tensor) -> Tensor:
        if window.shape != (1, self.lookback_len):
            raise DimensionError(f"baseline expects (1, {self.lookback_len}), got {window.shape}")
        return T.add(T.matmul(window, self.params["w"]), self.params["b"])
