import math

import numpy as np
import pytest

from dbnseg import ops
from dbnseg.gradcheck import grad_check
from dbnseg.tensor import ShapeError, Tape, Tensor


def conv_reference(x, k, b, stride, pad):
    """Nested-loop convolution accumulated in float64."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = float(b[o])
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += float(xp[i, c, y * stride + dy, xx * stride + dx]) * float(k[o, c, dy, dx])
                    out[i, o, y, xx] = acc
    return out


def abs_reference(x, k, stride, pad):
    return conv_reference(np.abs(x), np.abs(k), np.zeros(k.shape[0]), stride, pad)


def bilinear_scalar(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = max((i + 0.5) * h / oh - 0.5, 0.0)
            sx = max((j + 0.5) * w / ow - 0.5, 0.0)
            y0, x0 = min(int(math.floor(sy)), h - 1), min(int(math.floor(sx)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ty, tx = sy - y0, sx - x0
            top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
            bot = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
            out[i, j] = top * (1 - ty) + bot * ty
    return out


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    k = np.eye(3, dtype=np.float32)[:, :, None, None]
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3, np.float32)))
    assert np.array_equal(out.data, x)


def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(1)
    k = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    b = np.float32([0.5, -1.0, 2.0, 0.0])
    out = ops.conv2d(Tensor(np.zeros((1, 2, 6, 6), np.float32)), Tensor(k), Tensor(b), padding=1)
    assert np.array_equal(out.data, np.broadcast_to(b[None, :, None, None], out.shape))


def test_conv_small_case_matches_loops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    k = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=1).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1).data
    ref = conv_reference(x, k, b, 1, 1)
    bound = 8 * np.finfo(np.float32).eps * (abs_reference(x, k, 1, 1) + abs(b[0]))
    assert np.all(np.abs(out - ref) <= bound)


def test_conv_matches_loops_on_100_shapes():
    rng = np.random.default_rng(3)
    eps = np.finfo(np.float32).eps
    for _ in range(100):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        ks = int(rng.choice([1, 3]))
        h, w = rng.integers(ks, 7, size=2)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, ks // 2 + 1))
        x = rng.normal(size=(n, cin, h, w)).astype(np.float32)
        k = rng.normal(size=(cout, cin, ks, ks)).astype(np.float32)
        b = rng.normal(size=cout).astype(np.float32)
        out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
        ref = conv_reference(x, k, b, stride, pad)
        assert out.shape == ref.shape
        # one float32 rounding per accumulated term at most
        terms = cin * ks * ks + 1
        bound = terms * eps * (abs_reference(x, k, stride, pad) + np.abs(b)[None, :, None, None])
        assert np.all(np.abs(out - ref) <= bound)


def test_conv_rejects_bad_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((1, 3, 3, 3), np.float32)))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((2, 4, 4), np.float32)), Tensor(np.zeros((1, 2, 3, 3), np.float32)))
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 3, 3), np.float32)), stride=0)


def test_conv_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for stride in (1, 2):
        rep = grad_check(lambda a, c, d: ops.conv2d(a, c, d, stride, 1), [x, k, b])
        assert rep.passed, str(rep)


# ---------------------------------------------------------------- bilinear

def test_bilinear_same_size_is_identity():
    x = np.random.default_rng(5).normal(size=(2, 3, 5, 7)).astype(np.float32)
    assert np.array_equal(ops.bilinear_resize(Tensor(x), 5, 7).data, x)


@pytest.mark.parametrize("size", [(1, 1), (3, 5), (8, 8), (13, 2)])
def test_bilinear_constant(size):
    x = np.full((1, 2, 4, 6), 7.0, np.float32)
    out = ops.bilinear_resize(Tensor(x), *size).data
    assert np.all(out == 7.0)


def test_bilinear_2x2_to_4x4_matches_formula():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = ops.bilinear_resize(Tensor(img[None, None].astype(np.float32)), 4, 4).data[0, 0]
    ref = bilinear_scalar(img, 4, 4)
    np.testing.assert_allclose(out, ref, atol=1e-6)
    assert out[0, 0] == 0.0 and out[-1, -1] == 3.0
    assert out[1, 1] == pytest.approx(0.75)


def test_bilinear_random_downsample_matches_formula():
    img = np.random.default_rng(6).normal(size=(7, 5))
    out = ops.bilinear_resize(Tensor(img[None, None].astype(np.float32)), 3, 4).data[0, 0]
    np.testing.assert_allclose(out, bilinear_scalar(img, 3, 4), atol=1e-5)


def test_bilinear_gradient():
    x = np.random.default_rng(7).normal(size=(1, 2, 3, 4))
    for size in [(6, 8), (2, 3), (5, 5)]:
        rep = grad_check(lambda a: ops.bilinear_resize(a, *size), [x])
        assert rep.passed, str(rep)


def test_bilinear_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        ops.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2), np.float32)), 0, 2)


# ---------------------------------------------------------------- softmax

def test_softmax_worked_example():
    out = ops.softmax(Tensor(np.float32([1.0, 2.0])), axis=0).data
    np.testing.assert_allclose(out, [0.26894, 0.73106], atol=1e-5)
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(out, e / e.sum(), atol=1e-6)


def test_softmax_uniform():
    out = ops.softmax(Tensor(np.full((2, 5, 3), 0.3, np.float32)), axis=1).data
    assert np.allclose(out, 1 / 5, atol=1e-7)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(8)
    for axis in (0, 1, -1):
        out = ops.softmax(Tensor(rng.normal(size=(4, 6, 3)).astype(np.float32)), axis).data
        assert np.all(np.abs(out.sum(axis=axis) - 1) <= 1e-6)


def test_softmax_shift_invariance_is_exact():
    # dyadic inputs keep x + c exact, so the max-subtracted values match bitwise
    rng = np.random.default_rng(14)
    x = (rng.integers(-64, 64, size=(3, 5, 4)) / 16).astype(np.float32)
    for axis in (0, 1, 2):
        out = ops.softmax(Tensor(x), axis).data
        for c in (3.0, -7.5, 100.0):
            assert np.array_equal(ops.softmax(Tensor(x + np.float32(c)), axis).data, out)


def test_softmax_large_inputs_stay_finite():
    out = ops.softmax(Tensor(np.float32([1e4, 0.0, -1e4])), 0).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0


# ---------------------------------------------------------------- elementwise

def test_relu_sigmoid_values():
    x = Tensor(np.float32([-2.0, 0.0, 3.0]))
    assert ops.relu(x).data.tolist() == [0.0, 0.0, 3.0]
    s = ops.sigmoid(Tensor(np.float32([-1000.0, 0.0, 1000.0]))).data
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ops.log(Tensor(np.float32([1.0, 0.0])))


def test_broadcast_add_gradient():
    rng = np.random.default_rng(9)
    rep = grad_check(ops.add, [rng.normal(size=(2, 3, 4)), rng.normal(size=(1, 3, 1))])
    assert rep.passed, str(rep)


def test_concat_and_affine_gradients():
    rng = np.random.default_rng(10)
    rep = grad_check(lambda a, b: ops.concat([a, b], 1), [rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 1, 3))])
    assert rep.passed
    rep = grad_check(ops.channel_affine, [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3)])
    assert rep.passed


# ---------------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform_is_ln4():
    loss = ops.cross_entropy(Tensor(np.zeros((2, 4, 3, 3), np.float32)), np.zeros((2, 3, 3), np.int64))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_confident_correct():
    mask = np.random.default_rng(11).integers(0, 3, size=(1, 4, 4))
    logits = np.eye(3, dtype=np.float32)[mask].transpose(0, 3, 1, 2) * np.float32(1e3)
    assert ops.cross_entropy(Tensor(logits), mask).item() < 1e-3


def test_cross_entropy_scalar_oracle():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(1, 3, 2, 2))
    mask = np.array([[[0, 2], [1, 1]]])
    total = 0.0
    for y in range(2):
        for x in range(2):
            z = logits[0, :, y, x]
            total += -(z[mask[0, y, x]] - math.log(sum(math.exp(v) for v in z)))
    out = ops.cross_entropy(Tensor(logits.astype(np.float32)), mask).item()
    assert out == pytest.approx(total / 4, abs=1e-5)
    rep = grad_check(lambda z: ops.cross_entropy(z, mask), [logits])
    assert rep.passed


def test_cross_entropy_ignore_id():
    logits = np.zeros((1, 2, 1, 2), np.float32)
    logits[0, 0, 0, 0] = 5.0
    mask = np.array([[[0, 255]]])
    out = ops.cross_entropy(Tensor(logits), mask, ignore_id=255).item()
    assert out == pytest.approx(math.log(1 + math.exp(-5.0)), abs=1e-6)
    assert ops.cross_entropy(Tensor(logits), np.full((1, 1, 2), 255), ignore_id=255).item() == 0.0
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(logits), np.array([[[0, 2]]]))


# ---------------------------------------------------------------- tape

def test_tape_accumulates_shared_inputs():
    x = Tensor(np.float32([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.add(ops.mul(x, x), x)
    (g,) = tape.gradient(y, [x])
    assert g.tolist() == [3.0, 5.0]


def test_no_records_without_tape_or_grad():
    x = Tensor(np.ones(3, np.float32))
    with Tape() as tape:
        ops.relu(x)
    assert len(tape) == 0


def test_unreached_source_gets_zero():
    a = Tensor(np.ones(2, np.float32), requires_grad=True)
    b = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Tape() as tape:
        y = ops.scalar_affine(a, 2.0)
    ga, gb = tape.gradient(y, [a, b])
    assert ga.tolist() == [2.0, 2.0] and gb.tolist() == [0.0, 0.0, 0.0]


def test_outputs_stay_float32():
    rng = np.random.default_rng(13)
    # float64 is kept as given (grad_check relies on it); other inputs become float32
    assert Tensor(rng.normal(size=3)).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
    x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
    assert ops.conv2d(x, k, padding=1).dtype == np.float32
    assert ops.bilinear_resize(x, 8, 8).dtype == np.float32
