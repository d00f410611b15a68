import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gfuse import tensor as T
from gfuse.tensor import GradTape, Tensor

from oracles import central_difference, naive_conv2d, naive_conv_transpose2d, naive_softmax


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def param(arr):
    return Tensor(arr, requires_grad=True)


def analytic_grad(fn, *arrays):
    params = [param(a) for a in arrays]
    with GradTape() as tape:
        loss = fn(*params)
    return tape.gradient(loss, params)


def assert_fd(fn, *arrays, tol=1e-6):
    grads = analytic_grad(fn, *arrays)
    for k, (arr, g) in enumerate(zip(arrays, grads)):
        def scalar(v, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(v)
            return fn(*args).item()

        num = central_difference(scalar, arr)
        rel = np.max(np.abs(g - num) / np.maximum(1.0, np.abs(num)))
        assert rel < tol, f"input {k}: rel err {rel}"


# conv2d --------------------------------------------------------------------

def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 3, 5, 4)
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_input_gives_bias():
    rng = np.random.default_rng(1)
    w = rand(rng, 4, 2, 3, 3)
    b = np.array([0.5, -1.0, 2.0, 3.25])
    out = T.conv2d(Tensor(np.zeros((1, 2, 6, 6))), Tensor(w), Tensor(b), padding=(1, 1))
    for o in range(4):
        assert np.all(out.data[0, o] == b[o])


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(2)
    x = rand(rng, 1, 3, 4, 4)
    w = rand(rng, 2, 3, 3, 3)
    b = rand(rng, 2)
    expected = naive_conv2d(x, w, b)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize(
    "kernel,stride,padding",
    [((3, 3), 1, (1, 1)), ((1, 5), 1, (0, 2)), ((5, 1), 1, (2, 0)), ((3, 3), 2, (1, 1)), ((1, 1), 2, (0, 0)), ((2, 3), 2, (0, 1))],
)
def test_conv2d_variants_match_naive(kernel, stride, padding):
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 7, 6)
    w = rand(rng, 4, 3, *kernel)
    b = rand(rng, 4)
    expected = naive_conv2d(x, w, b, stride, padding)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize(
    "kernel,stride,padding",
    [((3, 3), 1, (1, 1)), ((1, 5), 1, (0, 2)), ((5, 1), 1, (2, 0)), ((3, 3), 2, (1, 1)), ((1, 1), 2, (0, 0)), ((2, 3), 2, (0, 1))],
)
def test_conv2d_gradients(kernel, stride, padding):
    rng = np.random.default_rng(4)
    x = rand(rng, 1, 2, 5, 6)
    w = rand(rng, 3, 2, *kernel)
    b = rand(rng, 3)
    probe = rand(rng, *naive_conv2d(x, w, b, stride, padding).shape)

    def fn(x_, w_, b_):
        return (T.conv2d(x_, w_, b_, stride=stride, padding=padding) * probe).sum()

    assert_fd(fn, x, w, b)


def test_conv2d_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


@pytest.mark.parametrize("kernel", [(3, 3), (5, 5), (1, 5), (5, 1), (1, 1), (7, 3)])
def test_same_padding_preserves_spatial_dims(kernel):
    kh, kw = kernel
    x = Tensor(np.ones((1, 2, 9, 8)))
    w = Tensor(np.ones((3, 2, kh, kw)))
    out = T.conv2d(x, w, padding=((kh - 1) // 2, (kw - 1) // 2))
    assert out.shape == (1, 3, 9, 8)


# transposed convolution ----------------------------------------------------

def test_conv_transpose_identity():
    rng = np.random.default_rng(5)
    x = rand(rng, 2, 3, 4, 5)
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = T.conv_transpose2d(Tensor(x), Tensor(w), None, stride=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("kernel,stride", [((2, 2), 2), ((3, 3), 2), ((1, 1), 1), ((3, 2), 1)])
def test_conv_transpose_matches_scatter(kernel, stride):
    rng = np.random.default_rng(6)
    x = rand(rng, 1, 2, 3, 2)
    w = rand(rng, 2, 3, *kernel)
    b = rand(rng, 3)
    expected = naive_conv_transpose2d(x, w, b, stride)
    got = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)


def test_conv_transpose_stride2_doubles():
    rng = np.random.default_rng(7)
    x = rand(rng, 1, 1, 2, 2)
    w = rand(rng, 1, 1, 2, 2)
    out = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), stride=2)
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, naive_conv_transpose2d(x, w, np.zeros(1), 2), atol=1e-12)


@pytest.mark.parametrize("kernel,stride", [((2, 2), 2), ((3, 3), 2), ((1, 1), 1)])
def test_conv_transpose_gradients(kernel, stride):
    rng = np.random.default_rng(8)
    x = rand(rng, 1, 2, 3, 3)
    w = rand(rng, 2, 2, *kernel)
    b = rand(rng, 2)

    def fn(x_, w_, b_):
        return T.conv_transpose2d(x_, w_, b_, stride=stride).sum()

    assert_fd(fn, x, w, b)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        T.conv_transpose2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((2, 1, 2, 2))), stride=2)


# activations ---------------------------------------------------------------

def test_sigmoid_and_mish_at_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert T.mish(Tensor([0.0])).data[0] == 0.0


def test_mish_one_matches_high_precision():
    mpmath.mp.dps = 50
    ref = mpmath.mpf(1) * mpmath.tanh(mpmath.log(1 + mpmath.e))
    assert abs(T.mish(Tensor([1.0])).data[0] - float(ref)) < 1e-15


def test_activation_ranges_and_saturation():
    x = Tensor(np.array([-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0]))
    s = T.sigmoid(x).data
    t = T.tanh(x).data
    m = T.mish(x).data
    assert np.all((s >= 0) & (s <= 1))
    assert np.all((t >= -1) & (t <= 1))
    assert np.all(np.isfinite(m))
    assert m[-1] == 800.0
    assert s[3] == 0.5


@pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.mish, T.softplus])
def test_activation_gradients(op):
    rng = np.random.default_rng(9)
    x = rand(rng, 3, 4)
    assert_fd(lambda t: (op(t) * Tensor(np.arange(12.0).reshape(3, 4))).sum(), x)


# softmax -------------------------------------------------------------------

def test_softmax_simple_rows():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]]), 1.0).data, [[0.5, 0.5]])
    for c in (-500.0, 0.0, 3.7, 1e3):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[c, c, c]]), 1.0).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_matches_naive():
    rng = np.random.default_rng(10)
    row = rand(rng, 7)
    got = T.softmax_rows(Tensor(row[None]), 2.5).data[0]
    np.testing.assert_allclose(got, naive_softmax(row, 2.5), atol=1e-12, rtol=0)


def test_softmax_rejects_nonpositive_divisor():
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor([[1.0]]), 0.0)


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
               elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    p = T.softmax_rows(Tensor(x), 1.0).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    q = T.softmax_rows(Tensor(x + shift), 1.0).data
    np.testing.assert_allclose(p, q, atol=1e-9)


def test_softmax_gradient():
    rng = np.random.default_rng(11)
    x = rand(rng, 3, 5)
    probe = rand(rng, 3, 5)
    assert_fd(lambda t: (T.softmax_rows(t, 1.7) * probe).sum(), x)


# layer norm / linear / plumbing -------------------------------------------

def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor(np.full((2, 5), 3.3)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_gradient():
    rng = np.random.default_rng(12)
    x, g, b = rand(rng, 4, 6), rand(rng, 6), rand(rng, 6)
    probe = rand(rng, 4, 6)
    assert_fd(lambda x_, g_, b_: (T.layer_norm(x_, g_, b_) * probe).sum(), x, g, b)


def test_linear_identity():
    rng = np.random.default_rng(13)
    x = rand(rng, 3, 4)
    out = T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_gradient():
    rng = np.random.default_rng(14)
    x, w, b = rand(rng, 2, 3, 4), rand(rng, 5, 4), rand(rng, 5)
    probe = rand(rng, 2, 3, 5)
    assert_fd(lambda x_, w_, b_: (T.linear(x_, w_, b_) * probe).sum(), x, w, b)


def test_concat_split_round_trip():
    rng = np.random.default_rng(15)
    parts = [rand(rng, 2, k, 3) for k in (1, 4, 2)]
    joined = T.concat([Tensor(p) for p in parts], axis=1)
    back = T.split(joined, [1, 4, 2], axis=1)
    for a, b in zip(parts, back):
        np.testing.assert_array_equal(a, b.data)


def test_plumbing_gradients():
    rng = np.random.default_rng(16)
    a, b = rand(rng, 2, 3), rand(rng, 3, 4)
    c = rand(rng, 2, 1, lo=0.5, hi=2.0)

    def fn(a_, b_, c_):
        ab = T.matmul(a_, b_)
        joined = T.concat([ab, a_ * c_], axis=1)
        left, right = T.split(joined, [5, 2], axis=1)
        r = T.reshape(left, (5, 2)).transpose() / c_
        return (T.square(r).sum() + T.sqrt(T.square(right) + 1.0).sum() - T.exp(right * 0.1).mean()
                + (a_ - c_).sum())

    assert_fd(fn, a, b, c)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ValueError):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ValueError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))], axis=0)


def test_non_finite_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(17)
    x = rand(rng, 1, 2, 4, 4)
    w = rand(rng, 2, 2, 3, 3)
    xt, wt = Tensor(x), Tensor(w)
    T.mish(T.conv2d(xt, wt, padding=(1, 1)))
    np.testing.assert_array_equal(xt.data, x)
    np.testing.assert_array_equal(wt.data, w)
    assert not xt.data.flags.writeable


# tape ----------------------------------------------------------------------

def test_unused_leaf_gets_exact_zero():
    a = param(np.array([1.0, 2.0]))
    unused = param(np.array([3.0]))
    with GradTape() as tape:
        loss = T.square(a).sum()
    ga, gu = tape.gradient(loss, [a, unused])
    np.testing.assert_array_equal(ga, [2.0, 4.0])
    np.testing.assert_array_equal(gu, [0.0])


def test_tape_visits_each_node_once():
    a = param(np.array([1.5]))
    calls = []
    with GradTape() as tape:
        b = a * 2.0
        c = b * b
        loss = (c + b).sum()
    for i, (out, inputs, vjp) in enumerate(tape.nodes):
        def wrapped(g, vjp=vjp, i=i):
            calls.append(i)
            return vjp(g)
        tape.nodes[i] = (out, inputs, wrapped)
    (g,) = tape.gradient(loss, [a])
    assert sorted(calls) == list(range(len(tape.nodes)))
    assert g[0] == pytest.approx(8 * 1.5 + 2)


def test_no_recording_outside_tape():
    a = param(np.array([1.0]))
    b = a * 3.0
    assert not b.requires_grad


def test_grad_check_sum_of_squares():
    rng = np.random.default_rng(18)
    x = param(rand(rng, 4, 3))
    err = T.grad_check(lambda: T.square(x).sum(), [x])
    assert err < 1e-8


def test_grad_check_rejects_non_finite():
    x = param(np.array([1.0]))
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        T.grad_check(lambda: T.exp(x * 1000.0).sum(), [x])


# portable tensor file ------------------------------------------------------

def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    arr = rand(rng, 2, 3, 4)
    path = tmp_path / "t.bin"
    T.save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:8] == b"GFTENSR1"
    assert int.from_bytes(raw[8:12], "little") == 3
    assert [int.from_bytes(raw[12 + 4 * i:16 + 4 * i], "little") for i in range(3)] == [2, 3, 4]
    assert len(raw) == 24 + 8 * 24
    np.testing.assert_array_equal(T.load_tensor(path), arr)


def test_tensor_file_rejects_garbage(tmp_path):
    from gfuse.tensor.io import TensorFileError, loads

    with pytest.raises(TensorFileError):
        loads(b"NOTMAGIC\x00\x00\x00\x00")
    from gfuse.tensor.io import dumps

    blob = dumps(np.ones((2, 2)))
    with pytest.raises(TensorFileError):
        loads(blob[:-3])


def test_mac_counter():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    w = Tensor(np.zeros((8, 4, 3, 3)))
    with T.count_macs() as c:
        T.conv2d(x, w, padding=(1, 1))
    assert c[0] == 5 * 5 * 8 * 4 * 9
