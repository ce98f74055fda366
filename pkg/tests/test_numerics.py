import numpy as np
import pytest

from advpose.numerics import (
    ContractError,
    DimensionError,
    ParameterError,
    Tape,
    Tensor,
    Triangular2,
    input_gradient,
    numerical_gradient,
    ops,
    relative_error,
)

FD_STEP = 1e-3
FD_TOL = 1e-4


def _check_grads(build, arrays, rng, probes=None):
    """Compare tape gradients of ``sum(out * proj)`` against central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
    proj = rng.standard_normal(out.shape)

    def f():
        return float((build(*[Tensor(a) for a in arrays]).data * proj).sum())

    with Tape() as tape:
        out = build(*tensors)
        loss = ops.sum(ops.mul(out, proj))
    analytic = tape.gradient(loss, tensors)
    for arr, g in zip(arrays, analytic):
        idx = None
        if probes is not None and arr.size > probes:
            flat = rng.choice(arr.size, probes, replace=False)
            idx = [np.unravel_index(i, arr.shape) for i in flat]
            numeric = numerical_gradient(f, arr, FD_STEP, idx)
            sel = tuple(np.array(idx).T)
            assert relative_error(g[sel], numeric[sel]) < FD_TOL
        else:
            numeric = numerical_gradient(f, arr, FD_STEP)
            assert relative_error(g, numeric) < FD_TOL


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


# ------------------------------------------------------------- conv2d

def test_conv_scalar_kernel():
    out = ops.conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_output_size():
    out = ops.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = ops.conv2d(x, k, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for n in range(2):
        for o in range(4):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="channel"):
        ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError, match="spatial"):
        ops.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


@pytest.mark.parametrize("shape,stride,pad", [((2, 3, 8, 8), 1, 1), ((2, 3, 8, 8), 2, 1), ((1, 2, 9, 7), 2, 0)])
def test_conv_gradients(shape, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape)
    k = rng.standard_normal((4, shape[1], 3, 3))
    b = rng.standard_normal(4)
    _check_grads(lambda x, k, b: ops.conv2d(x, k, b, stride=stride, padding=pad), [x, k, b], rng, probes=60)


# ------------------------------------------------------------- layer primitives

def test_gap_of_constant():
    out = ops.global_avg_pool(np.full((2, 3, 4, 5), 1.5))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 1.5))


def test_leaky_relu_values():
    out = ops.leaky_relu(np.array([-2.0, 3.0]), 0.1)
    np.testing.assert_allclose(out.data, [-0.2, 3.0])


def test_dropout_eval_identity_and_rate_check():
    x = Tensor(np.arange(6.0))
    assert ops.dropout(x, 0.5, train=False) is x
    with pytest.raises(ParameterError):
        ops.dropout(x, 1.0, train=True, rng=np.random.default_rng(0))


def test_dropout_is_seeded():
    x = np.ones((4, 10))
    a = ops.dropout(x, 0.2, True, np.random.default_rng(3)).data
    b = ops.dropout(x, 0.2, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)


def test_batch_norm_running_stats_and_eval():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 3, 4, 4)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, train=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    rm2, rv2 = rm.copy(), rv.copy()
    ev = ops.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, train=False)
    np.testing.assert_array_equal(rm, rm2)
    np.testing.assert_allclose(ev.data, (x - rm2.reshape(1, -1, 1, 1)) / np.sqrt(rv2.reshape(1, -1, 1, 1) + 1e-5))


def test_batch_norm_negative_variance():
    with pytest.raises(ParameterError):
        ops.batch_norm(np.zeros((2, 1, 2, 2)), np.ones(1), np.zeros(1), np.zeros(1), -np.ones(1), train=False)


SHAPES = [(3, 4), (5, 2, 3), (2, 3, 4, 4)]


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("name", ["relu", "leaky_relu", "sigmoid", "tanh", "exp"])
def test_elementwise_gradients(name, shape):
    rng = np.random.default_rng(4)
    fn = {"relu": ops.relu, "leaky_relu": lambda x: ops.leaky_relu(x, 0.1),
          "sigmoid": ops.sigmoid, "tanh": ops.tanh, "exp": ops.exp}[name]
    _check_grads(fn, [_away_from_zero(rng, shape)], rng)


@pytest.mark.parametrize("shape", [(4, 3, 2, 2), (6, 2, 3, 3), (3, 4)])
@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradients(shape, train):
    rng = np.random.default_rng(5)
    c = shape[1]
    x = rng.standard_normal(shape)
    g, b = rng.standard_normal(c), rng.standard_normal(c)
    rm, rv = rng.standard_normal(c), rng.random(c) + 0.5

    def build(x, g, b):
        return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), train=train)

    _check_grads(build, [x, g, b], rng)


@pytest.mark.parametrize("shape", [(1, 2, 3, 3), (2, 3, 4, 5), (3, 1, 2, 6)])
def test_gap_gradients(shape):
    rng = np.random.default_rng(6)
    _check_grads(ops.global_avg_pool, [rng.standard_normal(shape)], rng)


@pytest.mark.parametrize("n,i,o", [(1, 3, 2), (4, 5, 3), (2, 7, 9)])
def test_fully_connected_gradients(n, i, o):
    rng = np.random.default_rng(7)
    _check_grads(ops.linear, [rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)], rng)


@pytest.mark.parametrize("shape", [(2, 3), (4, 6), (1, 9)])
def test_dropout_gradients(shape):
    rng = np.random.default_rng(8)
    x = rng.standard_normal(shape)
    _check_grads(lambda x: ops.dropout(x, 0.3, True, np.random.default_rng(11)), [x], rng)


@pytest.mark.parametrize("shape", [(2, 3), (4, 6), (3, 2, 5)])
def test_row_norm_and_bce_gradients(shape):
    rng = np.random.default_rng(9)
    _check_grads(ops.row_norm, [rng.standard_normal(shape)], rng)
    y = rng.random(shape) > 0.5
    _check_grads(lambda z: ops.bce_with_logits(z, y), [rng.standard_normal(shape)], rng)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("n,d,h", [(2, 3, 4), (3, 5, 2), (1, 4, 3)])
def test_lstm_step_gradients(activation, n, d, h):
    rng = np.random.default_rng(10)
    arrays = [rng.standard_normal((n, d)), rng.standard_normal((n, h)), rng.standard_normal((n, h)),
              rng.standard_normal((d, 4 * h)) * 0.5, rng.standard_normal((h, 4 * h)) * 0.5, rng.standard_normal(4 * h) * 0.1]

    def build(x, hh, c, wi, wr, b):
        h1, c1 = ops.lstm_step(x, hh, c, wi, wr, b, activation=activation)
        return ops.concat([h1, c1], axis=1)

    _check_grads(build, arrays, rng)


def test_lstm_step_shape_error():
    with pytest.raises(DimensionError):
        ops.lstm_step(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((3, 4)), np.zeros((2, 8)), np.zeros(8))


# ------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_quadratic():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_tape_is_topological_and_freed():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = x * 3.0
        b = ops.exp(a)
        loss = ops.sum(b + a)
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert t.id in seen or t.id == x.id or not t.requires_grad
        seen.add(node.out.id)
    tape.backward(loss, retain_graph=True)
    first = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * first)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ops.exp(x)
    assert not y.requires_grad


def test_composed_chain_gradients():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 2, 6, 6))
    k = rng.standard_normal((4, 2, 3, 3))
    g, b = rng.random(4) + 0.5, rng.standard_normal(4)
    w, wb = rng.standard_normal((4, 3)), rng.standard_normal(3)

    def build(x, k, g, b, w, wb):
        y = ops.conv2d(x, k, None, stride=2, padding=1)
        y = ops.batch_norm(y, g, b, np.zeros(4), np.ones(4), train=True)
        y = ops.leaky_relu(y, 0.1)
        return ops.linear(ops.global_avg_pool(y), w, wb)

    _check_grads(build, [x, k, g, b, w, wb], rng, probes=40)


# ------------------------------------------------------------- input_gradient

def test_input_gradient_constant_model_is_zero():
    img = np.random.default_rng(0).random((1, 3, 4, 4))
    g = input_gradient(lambda x: Tensor(np.ones(9)), img, None, lambda out, y: ops.sum(out))
    np.testing.assert_array_equal(g, np.zeros_like(img))


def test_input_gradient_linear_model():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(12)
    g = input_gradient(lambda x: ops.sum(ops.mul(x, w)), rng.random(12), None, lambda out, y: out)
    np.testing.assert_allclose(g, w)


def test_input_gradient_leaves_weights_untouched():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((5, 3))
    before = w.copy()
    wt = Tensor(w)
    g = input_gradient(lambda x: ops.linear(x, wt), rng.random((2, 5)), None, lambda out, y: ops.sum(ops.mul(out, out)))
    assert g.shape == (2, 5)
    assert wt.grad is None
    assert np.array_equal(w, before)


# ------------------------------------------------------------- schedule

def test_triangular2_peaks_halve():
    sched = Triangular2(base_lr=1e-4, max_lr=1e-3, step_size=4)
    assert sched(0) == pytest.approx(1e-4)
    peaks = [sched(4 + 8 * k) - 1e-4 for k in range(4)]
    for a, b in zip(peaks, peaks[1:]):
        assert b == pytest.approx(a / 2)
    assert sched(8) == pytest.approx(1e-4)


# ------------------------------------------------------------- channels-last paths

@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 1, 3), (3, 2, 0)])
def test_conv_nhwc_matches_nchw(k, stride, pad):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((5, 3, k, k))
    ref = ops.conv2d(x, w, stride=stride, padding=pad).data
    got = ops.conv2d(x.transpose(0, 2, 3, 1), w, stride=stride, padding=pad, layout="NHWC").data
    np.testing.assert_allclose(got.transpose(0, 3, 1, 2), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 1, 3)])
def test_conv_nhwc_gradients(k, stride, pad):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 8, 7, 3))
    w = rng.standard_normal((4, 3, k, k))
    _check_grads(lambda x, w: ops.conv2d(x, w, stride=stride, padding=pad, layout="NHWC"), [x, w], rng, probes=60)


def test_conv_rejects_unknown_layout():
    with pytest.raises(ParameterError):
        ops.conv2d(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 1, 1)), layout="CHWN")


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_nhwc_matches_nchw(train):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((3, 4, 5, 6))
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    rm1, rv1 = np.zeros(4), np.ones(4)
    rm2, rv2 = np.zeros(4), np.ones(4)
    ref = ops.batch_norm(x, g, b, rm1, rv1, train=train).data
    got = ops.batch_norm(x.transpose(0, 2, 3, 1), g, b, rm2, rv2, train=train, layout="NHWC").data
    np.testing.assert_allclose(got.transpose(0, 3, 1, 2), ref, atol=1e-12)
    np.testing.assert_allclose(rm1, rm2, atol=1e-14)
    np.testing.assert_allclose(rv1, rv2, atol=1e-14)


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_leaky_equals_composition(train):
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, 4, 5, 6))
    g, b = rng.standard_normal(6), rng.standard_normal(6)
    rm1, rv1 = rng.standard_normal(6), rng.random(6) + 0.5
    rm2, rv2 = rm1.copy(), rv1.copy()
    ref = ops.leaky_relu(ops.batch_norm(x, g, b, rm1, rv1, train=train, layout="NHWC"), 0.1).data
    got = ops.batch_norm_leaky(x, g, b, rm2, rv2, train=train, slope=0.1).data
    np.testing.assert_allclose(got, ref, atol=1e-12)
    np.testing.assert_array_equal(rm1, rm2)
    np.testing.assert_array_equal(rv1, rv2)


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_leaky_gradients(train):
    rng = np.random.default_rng(15)
    x = rng.standard_normal((3, 3, 2, 4))
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    rm, rv = rng.standard_normal(4), rng.random(4) + 0.5

    def build(x, g, b):
        return ops.batch_norm_leaky(x, g, b, rm.copy(), rv.copy(), train=train, slope=0.1)

    _check_grads(build, [x, g, b], rng)


def test_gap_nhwc_gradients():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(ops.global_avg_pool(x, layout="NHWC").data, x.mean(axis=(1, 2)))
    _check_grads(lambda x: ops.global_avg_pool(x, layout="NHWC"), [x], rng)
