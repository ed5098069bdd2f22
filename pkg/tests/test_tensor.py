import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanets import tensor as T
from deltanets.tensor import NonFiniteError, ShapeError, Tape, Tensor, no_grad


def conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for dy in range(k):
                            for dz in range(k):
                                acc += xp[i, ic, y * stride + dy, z * stride + dz] * w[oc, ic, dy, dz]
                    out[i, oc, y, z] = acc
    return out


def conv_input_grad_loops(g, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    gp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(n):
        for oc in range(o):
            for y in range(g.shape[2]):
                for z in range(g.shape[3]):
                    gp[i, :, y * stride:y * stride + k, z * stride:z * stride + k] += g[i, oc, y, z] * w[oc]
    return gp[:, :, pad:pad + h, pad:pad + wd]


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 6))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_matches_loop_reference_documented_case(rng):
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    ref = conv_loops(x, w, b, 2, 1)
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-6


def test_conv_matches_loop_reference_random_configs():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, wd = rng.integers(k, 8, size=2)
        x, w, b = rng.normal(size=(n, c, h, wd)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        with Tape() as tape:
            out = T.conv2d(xt, wt, Tensor(b), stride=stride, padding=pad)
            g = rng.normal(size=out.shape)
            tape.backward(out, g)
        ref = conv_loops(x, w, b, stride, pad)
        assert np.max(np.abs(out.data - ref)) <= 1e-6 * max(1.0, np.abs(ref).max())
        gref = conv_input_grad_loops(g, w, x.shape, stride, pad)
        assert np.allclose(xt.grad, gref, atol=1e-10)


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ShapeError, match="3 channels"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_batch_norm_train_normalizes(rng):
    x = rng.normal(3.0, 2.0, size=(16, 4, 5, 5))
    rm, rv = np.zeros(4), np.ones(4)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)
    m = x.shape[0] * 25
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batch_norm_constant_channel_maps_to_beta():
    x = np.full((1, 2, 3, 3), 7.0)
    beta = np.array([0.25, -1.5])
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(beta), np.zeros(2), np.ones(2), training=True)
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, beta[None, :, None, None])


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.normal(size=(3, 2, 4, 4))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False, eps=1e-5).data
    assert np.allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None])


def test_scalar_op_values():
    assert T.sigmoid(Tensor(np.array(0.0))).data == 0.5
    assert np.array_equal(T.relu(Tensor(np.array([-3.0, 2.5]))).data, [0.0, 2.5])


@pytest.mark.parametrize("c", [2, 5, 10])
def test_cross_entropy_uniform_logits_is_log_c(c):
    loss = T.softmax_cross_entropy(Tensor(np.zeros((4, c))), np.arange(4) % c)
    assert loss.data == pytest.approx(np.log(c), rel=1e-12)


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_extreme_logits_stay_finite():
    z = Tensor(np.array([[1000.0, -1000.0], [-1000.0, 1000.0]]))
    assert np.isfinite(T.softmax_cross_entropy(z, [0, 1]).data)
    s = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert s[0] == 0.0 and s[1] == 1.0


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_output_is_an_error():
    big = Tensor(np.array([1e30], dtype=np.float32))
    with pytest.raises(NonFiniteError):
        T.mul(big, big)


def test_avg_pool_ragged_edge():
    x = np.arange(49, dtype=np.float64).reshape(1, 1, 7, 7)
    out = T.avg_pool2d(Tensor(x), 2).data
    assert out.shape == (1, 1, 4, 4)
    assert out[0, 0, 0, 0] == np.mean([0, 1, 7, 8])
    assert out[0, 0, 3, 3] == 48.0
    assert out[0, 0, 0, 3] == np.mean([6, 13])


def test_tile_channels_cycles():
    x = np.arange(2 * 3).reshape(1, 3, 1, 2).astype(float)
    out = T.tile_channels(Tensor(x), 7).data
    assert [int(out[0, i, 0, 0]) for i in range(7)] == [0, 2, 4, 0, 2, 4, 0]


def test_no_recording_outside_tape(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    out = T.mul(a, a)
    assert not out.requires_grad


def test_grads_accumulate_and_no_grad_suspends(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            tape.backward(T.sum_all(T.mul(a, Tensor(np.full(3, 2.0)))))
    assert np.allclose(a.grad, 4.0)
    with Tape():
        with no_grad():
            out = T.mul(a, a)
    assert not out.requires_grad


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    grads = []
    for _ in range(2):
        wt = Tensor(w.copy(), requires_grad=True)
        with Tape() as tape:
            tape.backward(T.sum_all(T.relu(T.conv2d(Tensor(x), wt, padding=1))))
        grads.append(wt.grad)
    assert np.array_equal(grads[0], grads[1])


def test_backward_requires_recorded_root():
    with Tape() as tape:
        with pytest.raises(RuntimeError):
            tape.backward(Tensor(np.ones(2)))


shapes = st.sampled_from([((3, 4), (4,)), ((3, 4), (1, 4)), ((2, 1, 5), (3, 1)), ((4,), (4,)), ((2, 3), ())])


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_broadcast_gradients_match_operand_shapes(pair, seed):
    r = np.random.default_rng(seed)
    sa, sb = pair
    a = Tensor(r.normal(size=sa), requires_grad=True)
    b = Tensor(r.normal(size=sb), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum_all(T.add(T.mul(a, b), a)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    # d/db sum(a*b) = sum of a over the broadcast axes
    expected = np.broadcast_to(a.data, np.broadcast_shapes(sa, sb))
    while expected.ndim > len(sb):
        expected = expected.sum(axis=0)
    for ax, n in enumerate(sb):
        if n == 1:
            expected = expected.sum(axis=ax, keepdims=True)
    assert np.allclose(b.grad, expected)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(0, 1))
def test_conv_is_linear_in_input(seed, stride, pad):
    r = np.random.default_rng(seed)
    x1, x2 = r.normal(size=(2, 2, 6, 6)), r.normal(size=(2, 2, 6, 6))
    w = Tensor(r.normal(size=(3, 2, 3, 3)))
    lhs = T.conv2d(Tensor(x1 + 2.0 * x2), w, stride=stride, padding=pad).data
    rhs = T.conv2d(Tensor(x1), w, stride=stride, padding=pad).data + 2.0 * T.conv2d(Tensor(x2), w, stride=stride,
                                                                                      padding=pad).data
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_values_and_grads_share_shape(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(2, 3, 4, 4)), requires_grad=True)
    with Tape() as tape:
        y = T.global_avg_pool(T.relu(T.tile_channels(T.avg_pool2d(x, 2), 5)))
        tape.backward(T.sum_all(y))
    assert y.shape == (2, 5)
    assert x.grad.shape == x.shape and x.grad.size == x.data.size
    assert np.all(np.isfinite(x.grad))
