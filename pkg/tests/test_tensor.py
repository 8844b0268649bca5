"""Tensor op semantics, tape behavior, and gradient verification."""

import numpy as np
import pytest

from utsf import tensor as T
from utsf.errors import DimensionError, NumericError, UsageError
from utsf.tensor import GradTape, Tensor, finite_diff_check, record_op

F32, F64 = np.float32, np.float64


def t64(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=F64)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(np.eye(2, dtype=F32)), m)
    assert np.array_equal(out.data, m.data)


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, np.array([[17.0], [39.0]], dtype=F32))


def test_matmul_against_triple_loop():
    # naive O(mkn) oracle, independent of numpy's @
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a, dtype=F64), Tensor(b, dtype=F64)).data
        assert np.allclose(got, want, atol=1e-12)


def test_matmul_grad_of_sum_is_column_sums():
    rng = np.random.default_rng(0)
    a = t64(rng, 3, 4)
    b = t64(rng, 4, 2, grad=False)
    with GradTape() as tape:
        loss = T.sum_all(T.matmul(a, b))
    tape.backward(loss)
    # d sum(A@B) / dA[i,k] = sum_j B[k,j], independent of the row i
    want = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    assert np.allclose(a.grad, want, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 2))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


# ---------------------------------------------------------------------------
# convolutions


def test_conv_zero_weights_zero_output():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 6)))
    out = T.conv1d_k2s2(x, Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros(3)))
    assert out.shape == (3, 3)
    assert np.all(out.data == 0.0)


def test_conv_pairwise_sums():
    # C_in=1, kernel [1,1]: output is the sum of adjacent input pairs
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    out = T.conv1d_k2s2(x, Tensor(np.ones((1, 1, 2))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, np.array([[3.0, 7.0]], dtype=F32))


def test_conv_shape_contract():
    x = Tensor(np.ones((4, 48)))
    out = T.conv1d_k2s2(x, Tensor(np.zeros((8, 4, 2))), Tensor(np.zeros(8)))
    assert out.shape == (8, 24)


def test_conv_odd_length_rejected():
    with pytest.raises(DimensionError):
        T.conv1d_k2s2(Tensor(np.ones((1, 5))), Tensor(np.ones((1, 1, 2))), Tensor(np.zeros(1)))


def test_conv_matches_direct_computation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8))
    w = rng.standard_normal((3, 2, 2))
    b = rng.standard_normal(3)
    got = T.conv1d_k2s2(Tensor(x, dtype=F64), Tensor(w, dtype=F64), Tensor(b, dtype=F64)).data
    for j in range(3):
        for t in range(4):
            want = b[j] + sum(w[j, k, r] * x[k, 2 * t + r] for k in range(2) for r in range(2))
            assert abs(got[j, t] - want) < 1e-12


def test_conv_transpose_shapes_and_zero_weight():
    x = Tensor(np.ones((8, 24)))
    out = T.conv_transpose1d_k2s2(x, Tensor(np.zeros((8, 4, 2))), Tensor(np.arange(4.0)))
    assert out.shape == (4, 48)
    # zero weight leaves only the bias, broadcast along positions
    assert np.array_equal(out.data, np.broadcast_to(np.arange(4.0, dtype=F32)[:, None], (4, 48)))


def test_conv_adjoint_identity():
    # <conv(x), y> == <x, conv_transpose(y)> with zero biases, same weight array
    rng = np.random.default_rng(11)
    for _ in range(20):
        c_in, c_out, p = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2 * int(rng.integers(1, 5))
        x = rng.standard_normal((c_in, p))
        y = rng.standard_normal((c_out, p // 2))
        w = rng.standard_normal((c_out, c_in, 2))
        zb_out = Tensor(np.zeros(c_out, dtype=F64))
        zb_in = Tensor(np.zeros(c_in, dtype=F64))
        lhs = float(np.sum(T.conv1d_k2s2(Tensor(x, dtype=F64), Tensor(w, dtype=F64), zb_out).data * y))
        rhs = float(np.sum(x * T.conv_transpose1d_k2s2(Tensor(y, dtype=F64), Tensor(w, dtype=F64), zb_in).data))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# pointwise conv and pooling


def test_pointwise_identity_and_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5)))
    same = T.pointwise_conv(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.allclose(same.data, x.data, atol=1e-7)
    bias = np.array([1.0, 2.0], dtype=F32)
    out = T.pointwise_conv(x, Tensor(np.zeros((2, 3))), Tensor(bias))
    assert np.array_equal(out.data, np.broadcast_to(bias[:, None], (2, 5)))


def test_pointwise_matches_per_column_matmul():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 7))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(4)
    got = T.pointwise_conv(Tensor(x, dtype=F64), Tensor(w, dtype=F64), Tensor(b, dtype=F64)).data
    for p in range(7):
        assert np.allclose(got[:, p], w @ x[:, p] + b, atol=1e-12)


def test_pool_identity_and_equal_bins():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    assert T.adaptive_avg_pool1d(x, 4) is x
    out = T.adaptive_avg_pool1d(x, 2)
    assert np.array_equal(out.data, np.array([[1.5, 3.5]], dtype=F32))


def test_pool_constant_and_overlapping_bins():
    const = T.adaptive_avg_pool1d(Tensor(np.full((2, 7), 3.25)), 3)
    assert np.allclose(const.data, 3.25, atol=1e-7)
    # 5 -> 3: bins [0,2), [1,4), [3,5) per the floor/ceil rule; middle bin overlaps both
    a = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])
    out = T.adaptive_avg_pool1d(Tensor(a, dtype=F64), 3)
    want = [1.5, 3.0, 4.5]
    assert np.allclose(out.data[0], want, atol=1e-12)


# ---------------------------------------------------------------------------
# softmax / layer norm / gelu


def test_softmax_uniform_and_shift_invariance():
    out = T.softmax_lastdim(Tensor(np.zeros((2, 5))))
    assert np.allclose(out.data, 0.2, atol=1e-7)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4))
    a = T.softmax_lastdim(Tensor(x, dtype=F64)).data
    b = T.softmax_lastdim(Tensor(x + 7.5, dtype=F64)).data
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_closed_form_row():
    out = T.softmax_lastdim(Tensor([0.0, float(np.log(3.0))], dtype=F64))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_rows_stochastic():
    rng = np.random.default_rng(2)
    out = T.softmax_lastdim(Tensor(5.0 * rng.standard_normal((6, 9)))).data
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_moments_and_constant_slice():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 16))
    g = Tensor(np.ones(16, dtype=F64))
    b = Tensor(np.zeros(16, dtype=F64))
    out = T.layer_norm(Tensor(x, dtype=F64), g, b).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-4)
    flat = T.layer_norm(Tensor(np.full((2, 8), 5.0, dtype=F64)), Tensor(np.ones(8, dtype=F64)),
                        Tensor(np.zeros(8, dtype=F64))).data
    assert np.all(flat == 0.0)


def test_layer_norm_hand_values():
    out = T.layer_norm(Tensor([[1.0, 2.0, 3.0]], dtype=F64), Tensor(np.ones(3, dtype=F64)),
                       Tensor(np.zeros(3, dtype=F64))).data
    # population sigma = sqrt(2/3)
    assert np.allclose(out, [[-1.2247, 0.0, 1.2247]], atol=1e-3)


def test_layer_norm_eps_validation():
    with pytest.raises(UsageError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_gelu_reference_points():
    # tanh-approximation fixed points: gelu(0)=0, near-linear for large positive x
    x = Tensor(np.array([0.0, 5.0, -5.0], dtype=F64))
    out = T.gelu(x).data
    assert out[0] == 0.0
    assert abs(out[1] - 5.0) < 1e-4
    assert abs(out[2]) < 1e-4


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0], dtype=F64), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(T.mul(x, x))
    tape.backward(loss)
    assert np.allclose(x.grad, 2.0 * x.data, atol=1e-12)


def test_backward_unreachable_leaf_gets_zeros():
    x = Tensor(np.ones(3, dtype=F64), requires_grad=True)
    off_path = Tensor(np.ones(4, dtype=F64), requires_grad=True)
    with GradTape() as tape:
        T.sum_all(off_path)  # recorded, but not part of the loss
        loss = T.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(off_path.grad, np.zeros(4))
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_accumulates_over_fanout():
    x = Tensor(np.array([2.0], dtype=F64), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(T.add(T.mul(x, x), T.mul(x, x)))  # 2x^2
    tape.backward(loss)
    assert np.allclose(x.grad, [8.0], atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = T.mul(x, x)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_non_finite_forward_names_the_op():
    big = Tensor(np.full(3, 1e30, dtype=F32), requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="mul"):
        T.mul(big, big)  # overflows float32 to inf


def test_forward_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 6)), dtype=F32)
        w = Tensor(rng.standard_normal((6, 6)), dtype=F32)
        out = T.softmax_lastdim(T.matmul(T.gelu(x), w))
        return out.data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# finite differences

# independent case table (deliberately not shared with the CLI suite)
def _fd_cases(rng, dtype):
    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=dtype)

    def sq(x):
        return T.mean_all(T.mul(x, x))

    w = t(3, 2, 2)
    return {
        "matmul": (lambda i: sq(T.matmul(i["a"], i["b"])), {"a": t(3, 4), "b": t(4, 2)}),
        "conv": (lambda i: sq(T.conv1d_k2s2(i["x"], i["w"], i["b"])), {"x": t(2, 6), "w": w, "b": t(3)}),
        "convT": (lambda i: sq(T.conv_transpose1d_k2s2(i["x"], i["w"], i["b"])),
                  {"x": t(3, 4), "w": w, "b": t(2)}),
        "pointwise": (lambda i: sq(T.pointwise_conv(i["x"], i["w"], i["b"])),
                      {"x": t(2, 5), "w": t(4, 2), "b": t(4)}),
        "pool": (lambda i: sq(T.adaptive_avg_pool1d(i["x"], 3)), {"x": t(2, 7)}),
        "softmax": (lambda i: sq(T.softmax_lastdim(i["x"])), {"x": t(3, 5)}),
        "layer_norm": (lambda i: sq(T.layer_norm(i["x"], i["g"], i["b"])),
                       {"x": t(4, 6), "g": t(6), "b": t(6)}),
        "gelu": (lambda i: sq(T.gelu(i["x"])), {"x": t(3, 4)}),
        "add_bcast": (lambda i: sq(T.add(i["a"], i["b"])), {"a": t(3, 4), "b": t(4)}),
        "sub": (lambda i: sq(T.sub(i["a"], i["b"])), {"a": t(2, 3), "b": t(2, 3)}),
        "mul_bcast": (lambda i: sq(T.mul(i["a"], i["b"])), {"a": t(3, 4), "b": t(1, 4)}),
        "narrow": (lambda i: sq(T.narrow(i["x"], 1, 1, 3)), {"x": t(2, 5)}),
        "concat": (lambda i: sq(T.concat([i["a"], i["b"]], 0)), {"a": t(2, 3), "b": t(1, 3)}),
        "reshape_transpose": (lambda i: sq(T.transpose(T.reshape(i["x"], (2, 6)), (1, 0))),
                              {"x": t(3, 4)}),
    }


def test_every_op_passes_finite_differences_f64():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in _fd_cases(rng, F64).items():
            rep = finite_diff_check(fn, inputs, tolerance=1e-6)
            assert rep.passed, f"{name} seed {seed}: {rep}"


def test_every_op_passes_finite_differences_f32():
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for name, (fn, inputs) in _fd_cases(rng, F32).items():
            rep = finite_diff_check(fn, inputs, tolerance=1e-3)
            assert rep.passed, f"{name} seed {seed}: {rep}"


def test_finite_diff_exact_for_linear_map():
    rng = np.random.default_rng(9)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True, dtype=F64)
    x = Tensor(rng.standard_normal((4, 1)), dtype=F64)
    rep = finite_diff_check(lambda i: T.sum_all(T.matmul(i["w"], x)), {"w": w}, tolerance=1e-9)
    assert rep.passed and rep.worst < 1e-9


def test_finite_diff_catches_corrupted_gradient():
    # custom op through the public extension point, with its VJP scaled by 1.01
    def bad_double(x):
        return record_op("bad_double", 2.0 * x.data, (x,), lambda g: (2.0 * 1.01 * g,))

    x = Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True, dtype=F64)
    rep = finite_diff_check(lambda i: T.sum_all(bad_double(i["x"])), {"x": x}, tolerance=1e-6)
    assert not rep.passed
    assert "FAIL" in str(rep)


def test_finite_diff_rejects_non_finite_inputs():
    x = Tensor(np.array([1.0, np.inf]), requires_grad=True, dtype=F64)
    with pytest.raises(NumericError, match="x"):
        finite_diff_check(lambda i: T.sum_all(i["x"]), {"x": x}, tolerance=1e-6)
