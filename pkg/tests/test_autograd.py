import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kinform.autograd import (
    FormatError,
    GradCheckError,
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    grad_check,
    load_tensor,
    ops,
    save_tensor,
    set_default_dtype,
    tensor_from_bytes,
    tensor_to_bytes,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def grads_of(loss_fn, *leaves):
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, leaves=leaves)
    return [t.grad for t in leaves]


# -- tape mechanics -------------------------------------------------------------

def test_mul_sum_gradient_matches_hand_derivative():
    a, b = leaf([1.0, 2.0, 3.0]), leaf([4.0, 5.0, 6.0])
    ga, gb = grads_of(lambda: ops.tensor_sum(ops.mul(a, b)), a, b)
    np.testing.assert_array_equal(ga, [4.0, 5.0, 6.0])
    np.testing.assert_array_equal(gb, [1.0, 2.0, 3.0])


def test_reused_input_accumulates():
    a = leaf([3.0])
    (g,) = grads_of(lambda: ops.tensor_sum(ops.mul(a, a)), a)
    np.testing.assert_array_equal(g, [6.0])


def test_unused_leaf_gets_zero_gradient():
    a, b = leaf([1.0, 2.0]), leaf([[1.0]])
    _, gb = grads_of(lambda: ops.tensor_sum(a), a, b)
    np.testing.assert_array_equal(gb, [[0.0]])


def test_backward_needs_scalar():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        out = ops.scale(a, 2.0)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(out)


def test_second_replay_rejected():
    a = leaf([1.0])
    with Tape() as tape:
        loss = ops.tensor_sum(a)
    tape.backward(loss)
    with pytest.raises(TapeError, match="already replayed"):
        tape.backward(loss)


def test_detached_loss_rejected():
    loss = ops.tensor_sum(leaf([1.0]))
    with pytest.raises(TapeError, match="detached"):
        backward(loss)


def test_operator_sugar_matches_ops():
    a, b = leaf([1.0, -2.0]), leaf([0.5, 3.0])
    np.testing.assert_array_equal((a + b).data, ops.add(a, b).data)
    np.testing.assert_array_equal((a - b).data, ops.sub(a, b).data)
    np.testing.assert_array_equal((a * 2.0).data, [2.0, -4.0])
    np.testing.assert_array_equal((-a).data, [-1.0, 2.0])


def test_shape_mismatch_is_an_error():
    with pytest.raises(ShapeError):
        ops.add(leaf([1.0, 2.0]), leaf([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        ops.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        ops.reciprocal(leaf([0.0]))


def test_float32_mode():
    set_default_dtype(np.float32)
    t = Tensor([1.0, 2.0])
    assert t.data.dtype == np.float32
    set_default_dtype(np.float64)
    with pytest.raises(ValueError):
        set_default_dtype(np.int32)


# -- forward oracles --------------------------------------------------------------

def test_sigmoid_is_stable_at_extremes():
    out = ops.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-300)


def test_softmax_rows_sum_to_one_and_log_softmax_agrees():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]))
    sm = ops.softmax(x).data
    np.testing.assert_allclose(sm.sum(axis=1), 1.0)
    np.testing.assert_allclose(np.exp(ops.log_softmax(x).data), sm)
    np.testing.assert_allclose(sm[1], [1 / 3] * 3)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 5, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    for stride in (1, 2):
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ho = ops.conv2d_output_size(5, 3, stride, 1)
        wo = ops.conv2d_output_size(6, 3, stride, 1)
        ref = np.zeros((2, ho, wo, 4))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3, :]
                ref[:, i, j, :] = np.einsum("nhwc,hwco->no", patch, w) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_output_size():
    assert ops.conv2d_output_size(108, 3, 2, 1) == 54
    assert ops.conv2d_output_size(27, 3, 2, 1) == 14
    assert ops.conv2d_output_size(12, 3, 1, 1) == 12


def test_conv1d_k1_is_a_per_position_linear_map():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    out = ops.conv1d_k1(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, x @ w + b)


def test_normalize_columns_unit_norm():
    w = Tensor(np.array([[3.0, 0.0], [4.0, 2.0]]))
    np.testing.assert_allclose(ops.normalize_columns(w).data, [[0.6, 0.0], [0.8, 1.0]])


def test_cross_entropy_value():
    logits = Tensor(np.array([[0.0, np.log(3.0)]]))
    # softmax = (1/4, 3/4)
    assert ops.cross_entropy(logits, [1]).item() == pytest.approx(-np.log(0.75))
    with pytest.raises(ValueError, match="out of range"):
        ops.cross_entropy(logits, [2])


def test_bce_value_and_clamp():
    p = Tensor(np.array([0.8, 0.0]))
    per = ops.binary_cross_entropy(p, [1.0, 0.0], reduction="none").data
    np.testing.assert_allclose(per, [-np.log(0.8), -np.log(1 - 1e-12)])
    assert np.isfinite(ops.binary_cross_entropy(Tensor([0.0]), [1.0]).item())


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_margin_psi_matches_angular_definition(m):
    theta = np.linspace(0.0, np.pi, 181)
    k = np.minimum(np.floor(theta * m / np.pi), m - 1)
    ref = (-1.0) ** k * np.cos(m * theta) - 2 * k
    out = ops.margin_psi(Tensor(np.cos(theta)), m).data
    np.testing.assert_allclose(out, ref, atol=1e-9)


def test_margin_psi_is_monotone_decreasing_in_angle():
    theta = np.linspace(0.0, np.pi, 721)
    out = ops.margin_psi(Tensor(np.cos(theta)), 4).data
    assert np.all(np.diff(out) <= 1e-12)
    assert out[0] == pytest.approx(1.0) and out[-1] == pytest.approx(-7.0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
                  elements=st.floats(-5, 5, allow_nan=False)))
def test_relu_gradient_is_indicator(x):
    t = leaf(x)
    (g,) = grads_of(lambda: ops.tensor_sum(ops.relu(t)), t)
    np.testing.assert_array_equal(g, (x > 0).astype(float))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_take_rows_gradient_counts_repeats(n, m, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=m)
    x = leaf(rng.normal(size=(n, 2)))
    (g,) = grads_of(lambda: ops.tensor_sum(ops.take_rows(x, idx)), x)
    np.testing.assert_array_equal(g[:, 0], np.bincount(idx, minlength=n))


# -- grad_check ---------------------------------------------------------------------

def test_grad_check_passes_on_smooth_function():
    rng = np.random.default_rng(0)
    w = leaf(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))
    rep = grad_check(lambda: ops.tensor_sum(ops.sigmoid(ops.matmul(x, w))), {"w": w})
    assert rep.passed and rep.max_error < 1e-6
    assert "w" in rep.format_table()


def test_grad_check_catches_a_wrong_gradient():
    x = leaf([0.3, -0.7])

    def bad():
        # forward computes 2x but backward claims 3
        from kinform.autograd.ops import _emit
        return ops.tensor_sum(_emit(x.data * 2.0, (x,), lambda g: (g * 3.0,), "bad"))

    rep = grad_check(bad, [x])
    assert not rep.passed and rep.failures == ["p0"]


def test_grad_check_rejects_nondeterministic_function():
    x = leaf([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(GradCheckError):
        grad_check(lambda: ops.scale(ops.tensor_sum(x), float(rng.random())), [x])


def test_grad_check_eps_range():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: ops.tensor_sum(x), [x], eps=0.1)


# -- serialization ------------------------------------------------------------------

@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_ktns_round_trip_is_bit_exact(arr):
    back = tensor_from_bytes(tensor_to_bytes(Tensor(arr))).data
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_ktns_layout(tmp_path):
    raw = tensor_to_bytes(Tensor(np.array([[1.0, 2.0, 3.0]])))
    assert raw[:4] == b"KTNS"
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:24] == (1).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1.0, 2.0, 3.0]
    save_tensor(tmp_path / "t.ktns", Tensor([5.0]))
    assert load_tensor(tmp_path / "t.ktns").data.tolist() == [5.0]


def test_ktns_rejects_corrupt_input():
    raw = tensor_to_bytes(Tensor(np.ones(3)))
    with pytest.raises(FormatError):
        tensor_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        tensor_from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        tensor_from_bytes(raw + b"\0")
