"""Dense tensors with reverse-mode automatic differentiation on numpy.

The op set covers exactly what the forecasting backbone needs: matmul,
stride-2 convolution / transpose convolution over the token axis, pointwise
convolution, adaptive average pooling, softmax, layer norm, GELU, and
elementwise arithmetic. Scalars are 32-bit by default; build tensors with
``dtype=np.float64`` for gradient verification.

Every forward op validates that its output is finite and raises
``NumericError`` naming the op otherwise, so instabilities surface where
they happen instead of propagating.

Recording happens on an explicit :class:`GradTape`::

    with GradTape() as tape:
        loss = mean_all(mul(d, d))
    tape.backward(loss)     # leaf .grad fields are populated

A tape and the tensors recorded on it belong to one thread; independent
tapes may run in parallel.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A row-major array of real scalars, optionally tracked for gradients.

    ``grad`` is populated by ``GradTape.backward`` for leaf tensors with
    ``requires_grad=True``; it accumulates additively until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of forward operations with enough saved state for VJPs.

    Nodes are appended in execution order, which is a topological order of
    the data-flow graph; ``backward`` walks them exactly once in reverse.
    Gradients accumulate additively when a tensor feeds multiple consumers.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("GradTape contexts must unwind LIFO")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf recorded on this tape.

        Leaves recorded but not reachable from ``loss`` receive zeros.
        """
        if loss.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self._nodes}
        for node in reversed(self._nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for tensor, contrib in zip(node.inputs, node.vjp(g)):
                if contrib is None:
                    continue
                key = id(tensor)
                held = grads.get(key)
                grads[key] = contrib if held is None else held + contrib
        # leaves = requires_grad inputs that no recorded op produced
        seen: dict[int, Tensor] = {}
        for node in self._nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    seen[id(tensor)] = tensor
        for key, tensor in seen.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(tensor.data)
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def _ensure_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


def record_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Finish a forward op: validate, wrap, and record on the active tape.

    ``vjp(g)`` must return one cotangent (ndarray or None) per input, in
    order. This is the extension point every built-in op goes through.
    """
    _ensure_finite(name, out_data)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and requires:
        tape._nodes.append(_Node(tuple(inputs), out, vjp))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", out, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record_op("sub", out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record_op("mul", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or stacked 2-D with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.swapaxes(-1, -2), a_data.swapaxes(-1, -2) @ g

    return record_op("matmul", out, (a, b), vjp)


def conv1d_k2s2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Kernel-2 stride-2 convolution over the last axis.

    ``out[j, t] = bias[j] + sum_k sum_r weight[j, k, r] * x[k, 2t + r]``;
    halves the position count, so the input length must be even.
    """
    if x.ndim != 2 or weight.ndim != 3 or bias.ndim != 1:
        raise DimensionError(
            f"conv1d_k2s2 expects x[C_in,P], weight[C_out,C_in,2], bias[C_out]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    c_in, p = x.shape
    c_out = weight.shape[0]
    if weight.shape != (c_out, c_in, 2) or bias.shape != (c_out,):
        raise DimensionError(f"conv1d_k2s2 weight/bias mismatch: {x.shape}, {weight.shape}, {bias.shape}")
    if p < 2 or p % 2 != 0:
        raise DimensionError(f"conv1d_k2s2 needs an even position count >= 2, got {p}")
    x2 = x.data.reshape(c_in, p // 2, 2)
    out = np.einsum("jkr,ktr->jt", weight.data, x2) + bias.data[:, None]
    w_data = weight.data

    def vjp(g):
        dx = np.einsum("jkr,jt->ktr", w_data, g).reshape(c_in, p)
        dw = np.einsum("jt,ktr->jkr", g, x2)
        db = g.sum(axis=1)
        return dx, dw, db

    return record_op("conv1d_k2s2", out, (x, weight, bias), vjp)


def conv_transpose1d_k2s2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Adjoint (up to bias) of ``conv1d_k2s2``; doubles the position count.

    ``out[j, 2t + r] = bias[j] + sum_k weight[k, j, r] * x[k, t]``.
    """
    if x.ndim != 2 or weight.ndim != 3 or bias.ndim != 1:
        raise DimensionError(
            f"conv_transpose1d_k2s2 expects x[C_in,P], weight[C_in,C_out,2], bias[C_out]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    c_in, p = x.shape
    if weight.shape[0] != c_in or weight.shape[2] != 2:
        raise DimensionError(f"conv_transpose1d_k2s2 weight mismatch: {x.shape}, {weight.shape}")
    c_out = weight.shape[1]
    if bias.shape != (c_out,):
        raise DimensionError(f"conv_transpose1d_k2s2 bias mismatch: {weight.shape}, {bias.shape}")
    out2 = np.einsum("kjr,kt->jtr", weight.data, x.data)
    out = out2.reshape(c_out, 2 * p) + bias.data[:, None]
    w_data, x_data = weight.data, x.data

    def vjp(g):
        g2 = g.reshape(c_out, p, 2)
        dx = np.einsum("kjr,jtr->kt", w_data, g2)
        dw = np.einsum("jtr,kt->kjr", g2, x_data)
        db = g.sum(axis=1)
        return dx, dw, db

    return record_op("conv_transpose1d_k2s2", out, (x, weight, bias), vjp)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position channel projection: matmul applied independently at each position."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"pointwise_conv expects x[C_in,P], weight[C_out,C_in], bias[C_out]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if weight.shape[1] != x.shape[0] or bias.shape[0] != weight.shape[0]:
        raise DimensionError(f"pointwise_conv shape mismatch: {x.shape}, {weight.shape}, {bias.shape}")
    return add(matmul(weight, x), reshape(bias, (bias.shape[0], 1)))


_POOL_MATRICES: dict[tuple, np.ndarray] = {}


def _pool_matrix(l_in: int, out_len: int, dtype) -> np.ndarray:
    key = (l_in, out_len, np.dtype(dtype).name)
    cached = _POOL_MATRICES.get(key)
    if cached is None:
        m = np.zeros((out_len, l_in), dtype=dtype)
        for t in range(out_len):
            start = (t * l_in) // out_len
            end = -((-(t + 1) * l_in) // out_len)  # ceil
            m[t, start:end] = 1.0 / (end - start)
        cached = _POOL_MATRICES[key] = m
    return cached


def adaptive_avg_pool1d(x: Tensor, out_len: int) -> Tensor:
    """Mean over bins [floor(t*L/out), ceil((t+1)*L/out)) per output position t.

    Bins may overlap by one element when lengths are incommensurate, so this
    is realized as a cached averaging matrix rather than reduceat.
    """
    if x.ndim != 2:
        raise DimensionError(f"adaptive_avg_pool1d expects x[C,L], got {x.shape}")
    if out_len < 1 or x.shape[1] < 1:
        raise DimensionError(f"adaptive_avg_pool1d needs positive lengths, got L={x.shape[1]}, out={out_len}")
    if out_len == x.shape[1]:
        return x
    m = _pool_matrix(x.shape[1], out_len, x.dtype)
    out = x.data @ m.T

    def vjp(g):
        return (g @ m,)

    return record_op("adaptive_avg_pool1d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization and activations


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record_op("softmax_lastdim", s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to mean 0 / population variance 1, then affine."""
    if eps <= 0:
        raise UsageError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gain_data = gain.data
    reduce_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain_data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        return dx, dgain, dbias

    return record_op("layer_norm", out, (x, gain, bias), vjp)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)
    x_data = x.data

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x_data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x_data * (1.0 - t**2) * du),)

    return record_op("gelu", out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(in_shape),)

    return record_op("reshape", out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return record_op("transpose", out, (x,), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` elements from ``start`` along ``axis``."""
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index]
    in_shape = x.shape

    def vjp(g):
        dx = np.zeros(in_shape, dtype=g.dtype)
        dx[index] = g
        return (dx,)

    return record_op("narrow", out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes[:-1])

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record_op("concat", out, tuple(tensors), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    in_shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, in_shape).copy(),)

    return record_op("sum_all", out, (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    in_shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return record_op("mean_all", out, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient verification


class FiniteDiffReport:
    """Per-parameter max relative errors from a central-difference check."""

    def __init__(self, errors: dict[str, float], tolerance: float):
        self.errors = errors
        self.tolerance = tolerance

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [f"{name}: max rel err {err:.3e}" for name, err in sorted(self.errors.items())]
        out.append(f"{status}: worst {self.worst:.3e} vs tolerance {self.tolerance:.1e}")
        return out

    def __str__(self) -> str:
        return "\n".join(self.lines())


def finite_diff_check(
    fn: Callable[[dict], Tensor],
    inputs: dict[str, Tensor],
    tolerance: float,
    step: float | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> FiniteDiffReport:
    """Compare tape gradients of ``fn(inputs)`` against central differences.

    ``fn`` must be a pure function of the given tensors returning a scalar.
    The relative error per parameter is ``max|g_tape - g_fd|`` normalized by
    the larger of the two gradients' max magnitudes; parameters whose
    gradient is zero on both sides report 0. ``max_entries`` caps how many
    coordinates per parameter are probed (seeded choice without replacement).
    """
    for name, t in inputs.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"finite_diff_check input '{name}' is not finite")
        t.zero_grad()
    with GradTape() as tape:
        loss = fn(inputs)
    if loss.size != 1:
        raise UsageError(f"finite_diff_check needs a scalar-valued fn, got shape {loss.shape}")
    tape.backward(loss)
    analytic = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for name, t in inputs.items()
    }

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, t in inputs.items():
        t.data = np.ascontiguousarray(t.data)  # the flat view below must alias t.data
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and max_entries < n:
            coords = rng.choice(n, size=max_entries, replace=False)
        else:
            coords = np.arange(n)
        h_base = step if step is not None else (1e-5 if t.dtype == np.float64 else 1e-2)
        a_flat = analytic[name].reshape(-1)
        num = np.zeros(len(coords), dtype=np.float64)
        for j, i in enumerate(coords):
            v = flat[i]
            h = h_base * max(1.0, abs(float(v)))
            flat[i] = v + h
            f_plus = fn(inputs).item()
            flat[i] = v - h
            f_minus = fn(inputs).item()
            flat[i] = v
            num[j] = (f_plus - f_minus) / (2.0 * h)
        ana = a_flat[coords].astype(np.float64)
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        if scale < 1e-10:
            errors[name] = 0.0
        else:
            errors[name] = float(np.abs(ana - num).max() / scale)
    return FiniteDiffReport(errors, tolerance)
