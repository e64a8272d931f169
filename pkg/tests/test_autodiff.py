import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurosens import autodiff as ad
from neurosens.autodiff import Tape, Tensor, grad_check


def conv_reference(x, w, b, stride, pad):
    """Direct quadruple loop; independent of the im2col path."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_reference(stride, pad):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv_reference(x, w, b, stride, pad), atol=1e-12)


def test_conv_shape_error_names_channels():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def _weights(seed, shape):
    return np.random.default_rng(seed).normal(size=shape)


# Each case maps a single input tensor to a scalar so grad_check can probe it.
W_CONV = _weights(1, (3, 2, 3, 3))
B_CONV = _weights(2, (3,))
W_DENSE = _weights(3, (5, 4))
BIAS4 = _weights(4, (4,))
PROJ = _weights(5, (2, 3, 4, 4))

CASES = {
    "add": (lambda t: ad.sum_all(ad.mul_scalar(ad.add(t, t), 0.5)), (3, 4)),
    "sub": (lambda t: ad.l2_norm_squared(ad.sub(t, Tensor(np.ones((3, 4))))), (3, 4)),
    "matmul": (lambda t: ad.l2_norm_squared(ad.matmul(t, Tensor(W_DENSE))), (2, 5)),
    "bias_add": (lambda t: ad.l2_norm_squared(ad.bias_add(t, Tensor(BIAS4))), (3, 4)),
    "conv2d": (lambda t: ad.l2_norm_squared(ad.conv2d(t, Tensor(W_CONV), Tensor(B_CONV), 1, 1)), (2, 2, 5, 5)),
    "conv2d_stride": (lambda t: ad.l2_norm_squared(ad.conv2d(t, Tensor(W_CONV), None, 2, 0)), (1, 2, 7, 7)),
    "conv2d_weight": (lambda t: ad.l2_norm_squared(ad.conv2d(Tensor(_weights(6, (2, 2, 5, 5))), t, None, 1, 1)),
                      (3, 2, 3, 3)),
    "relu": (lambda t: ad.l2_norm_squared(ad.relu(t)), (4, 5)),
    "maxpool2d": (lambda t: ad.sum_all(ad.channel_scale(ad.maxpool2d(t, 2), [1.0, 2.0, 3.0])), (2, 3, 4, 4)),
    "global_avg_pool": (lambda t: ad.l2_norm_squared(ad.global_avg_pool(t)), (2, 3, 4, 4)),
    "flatten": (lambda t: ad.l2_norm_squared(ad.matmul(ad.flatten(t), Tensor(_weights(7, (12, 2))))), (2, 3, 2, 2)),
    "reshape": (lambda t: ad.l2_norm_squared(ad.matmul(ad.reshape(t, (2, 6)), Tensor(_weights(8, (6, 3))))), (3, 4)),
    "concat": (lambda t: ad.l2_norm_squared(ad.matmul(ad.concat(t, t), Tensor(W_DENSE))), (2, 5)),
    "softmax_ce_batch": (lambda t: ad.softmax_cross_entropy(t, [0, 2, 1]), (3, 4)),
    "softmax_ce_single": (lambda t: ad.softmax_cross_entropy(t, 3), (5,)),
    "l1_distance": (lambda t: ad.l1_distance(t, Tensor(PROJ)), (2, 3, 4, 4)),
    "clamp": (lambda t: ad.l2_norm_squared(ad.clamp(t, -0.5, 0.5)), (4, 4)),
    "sign": (lambda t: ad.add(ad.sum_all(ad.sign(t)), ad.l2_norm_squared(t)), (3, 3)),
    "channel_scale": (lambda t: ad.l2_norm_squared(ad.channel_scale(t, [0.5, 2.0, 0.0])), (2, 3, 2, 2)),
    "take_channels": (lambda t: ad.l2_norm_squared(ad.take_channels(t, [2, 0])), (2, 3, 2, 2)),
}


def _safe_point(shape, seed):
    """Random point kept away from relu/clamp/sign/maxpool kinks so differences are smooth."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    # distinct magnitudes avoid maxpool ties
    x += np.arange(x.size).reshape(shape) * 1e-3
    return np.where(np.abs(np.abs(x) - 0.5) < 0.02, x + 0.05, x)


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    fn, shape = CASES[name]
    for seed in range(3):
        grad_check(fn, _safe_point(shape, seed), tolerance=1e-6)


def test_every_primitive_has_a_gradient_case():
    covered = {"softmax_cross_entropy" if k.startswith("softmax_ce") else k.removesuffix("_stride").removesuffix("_weight")
               for k in CASES}
    # sum, mul_scalar and l2_norm_squared are exercised inside other cases
    missing = set(ad.PRIMITIVES) - covered - {"sum", "mul_scalar", "l2_norm_squared"}
    assert not missing


def test_grad_check_raises_on_wrong_gradient():
    def broken(t):
        # value is 2*sum(t) but the recorded vjp claims slope 1
        return ad._emit(np.asarray(t.data.sum() * 2.0), (t,), lambda g: (np.ones(t.shape) * g,))

    with pytest.raises(AssertionError):
        grad_check(broken, np.ones(3), tolerance=1e-4)


def test_tape_single_use_and_scalar_loss():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        y = ad.sum_all(ad.mul_scalar(x, 3.0))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_allclose(g, 3.0)
    with pytest.raises(ad.TapeError):
        tape.gradient(y, [x])

    with Tape() as tape:
        tape.watch(x)
        z = ad.mul_scalar(x, 2.0)
    with pytest.raises((ad.TapeError, ad.ShapeError, ValueError)):
        tape.gradient(z, [x])


def test_unwatched_target_and_independent_target():
    x, w = Tensor(np.ones(2)), Tensor(np.ones(2))
    with Tape() as tape:
        tape.watch(x, w)
        y = ad.sum_all(x)
    gx, gw = tape.gradient(y, [x, w])
    np.testing.assert_array_equal(gx, [1.0, 1.0])
    np.testing.assert_array_equal(gw, [0.0, 0.0])

    with Tape() as tape:
        tape.watch(x)
        y = ad.sum_all(x)
    with pytest.raises(ad.TapeError):
        tape.gradient(y, [Tensor(np.ones(2))])


def test_nonfinite_input_rejected():
    with pytest.raises(ad.NonFiniteError):
        grad_check(lambda t: ad.sum_all(t), np.array([1.0, np.nan]))


def test_tensor_op_dispatch():
    x = Tensor(np.array([[1.0, -2.0]]))
    np.testing.assert_array_equal(ad.tensor_op("relu", x).data, [[1.0, 0.0]])
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.tensor_op("tanh", x)


def test_maxpool_ties_route_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        tape.watch(x)
        y = ad.sum_all(ad.maxpool2d(x, 2))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 1), st.integers(1, 2),
       st.integers(0, 2 ** 16))
def test_conv_reference_property(cin, cout, size, pad, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, cin, size, size))
    w = rng.normal(size=(cout, cin, 3, 3))
    if size + 2 * pad < 3:
        return
    got = ad.conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    np.testing.assert_allclose(got, conv_reference(x, w, None, stride, pad), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.integers(0, 7))
def test_cross_entropy_gradient_is_softmax_minus_onehot(logits, label):
    z = np.array(logits)
    label = label % len(z)
    t = Tensor(z)
    with Tape() as tape:
        tape.watch(t)
        loss = ad.softmax_cross_entropy(t, label)
    (g,) = tape.gradient(loss, [t])
    p = np.exp(z - z.max())
    p /= p.sum()
    p[label] -= 1.0
    np.testing.assert_allclose(g, p, atol=1e-12)
