import math
import warnings

import numpy as np
import pytest

from dbnseg.norm import (DomainBatchNorm, UnseenDomainWarning, bn_forward_eval, bn_forward_train,
                         dbn_forward_eval, dbn_forward_train)
from dbnseg.tensor import Tensor


def eq1_oracle(x, mean, var, gamma, beta, eps):
    """Scalar normalisation ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    return [gamma * (v - mean) / math.sqrt(var + eps) + beta for v in x]


def column(values):
    return Tensor(np.asarray(values, np.float32).reshape(-1, 1, 1, 1))


def test_constant_input_gives_beta():
    layer = DomainBatchNorm(2, num_domains=3)
    layer.beta.data[:] = 3.0
    out = dbn_forward_train(layer, Tensor(np.full((4, 2, 3, 3), 5.0, np.float32)), 1)
    assert np.all(out.data == 3.0)


def test_worked_example_1234():
    layer = DomainBatchNorm(1)
    out = dbn_forward_train(layer, column([1, 2, 3, 4]), 0).data.ravel()
    oracle = eq1_oracle([1, 2, 3, 4], 2.5, 1.25, 1.0, 0.0, 1e-5)
    np.testing.assert_allclose(out, oracle, atol=1e-4)
    np.testing.assert_allclose(out, [-1.34163, -0.44721, 0.44721, 1.34163], atol=1e-4)
    # running stats moved 10% of the way to (2.5, 1.25)
    assert layer.running_mean[0, 0] == pytest.approx(0.25)
    assert layer.running_var[0, 0] == pytest.approx(0.9 + 0.125)
    bn = bn_forward_train(layer.gamma, layer.beta, 1e-5, column([1, 2, 3, 4])).data.ravel()
    np.testing.assert_allclose(bn, oracle, atol=1e-4)


def test_single_domain_is_bitwise_bn():
    rng = np.random.default_rng(0)
    for trial in range(100):
        c = int(rng.integers(1, 5))
        x = Tensor((rng.normal(size=(int(rng.integers(1, 4)), c, 3, 2)) * rng.uniform(0.1, 5) + rng.normal())
                   .astype(np.float32))
        layer = DomainBatchNorm(c, num_domains=1)
        layer.gamma.data = rng.normal(size=c).astype(np.float32)
        layer.beta.data = rng.normal(size=c).astype(np.float32)
        a = dbn_forward_train(layer, x, 0).data
        b = bn_forward_train(layer.gamma, layer.beta, layer.epsilon, x).data
        assert np.array_equal(a, b)
        mean, var = layer.running_mean[0], layer.running_var[0]
        assert np.array_equal(dbn_forward_eval(layer, x, 0).data,
                              bn_forward_eval(layer.gamma, layer.beta, layer.epsilon, x, mean, var).data)


def test_eval_with_unit_stats():
    layer = DomainBatchNorm(3)
    layer.updates[:] = 1
    x = np.random.default_rng(1).normal(size=(2, 3, 2, 2)).astype(np.float32)
    out = dbn_forward_eval(layer, Tensor(x), 0).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_eval_domains_differ():
    layer = DomainBatchNorm(2, num_domains=2)
    layer.running_mean[1] = [0.5, -0.5]
    layer.running_var[1] = [2.0, 0.5]
    layer.updates[:] = 1
    x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 3, 3)).astype(np.float32))
    assert not np.allclose(dbn_forward_eval(layer, x, 0).data, dbn_forward_eval(layer, x, 1).data)


def test_eval_matches_oracle():
    rng = np.random.default_rng(3)
    layer = DomainBatchNorm(1, num_domains=2)
    layer.running_mean[1, 0], layer.running_var[1, 0] = 0.7, 1.9
    layer.gamma.data[:], layer.beta.data[:] = 1.5, -0.2
    layer.updates[:] = 1
    x = rng.normal(size=6)
    out = dbn_forward_eval(layer, column(x), 1).data.ravel()
    xs = np.float32(x).astype(float)
    ref = eq1_oracle(xs, float(np.float32(0.7)), float(np.float32(1.9)), 1.5, float(np.float32(-0.2)), 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_standardized_input_affine():
    x = np.float32([-1.0, 1.0, -1.0, 1.0])  # mean 0, population variance 1 exactly
    g, b = Tensor(np.float32([2.0])), Tensor(np.float32([1.0]))
    out = bn_forward_train(g, b, 1e-5, column(x)).data.ravel()
    np.testing.assert_allclose(out, 2 * x / np.sqrt(1 + 1e-5) + 1, rtol=1e-6)


def test_shift_invariance_exact():
    # dyadic values and a power-of-two element count keep every sum exact
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = (rng.integers(-32, 32, size=(4, 2, 2, 2)) / 8).astype(np.float32)
        layer = DomainBatchNorm(2, num_domains=2)
        base = dbn_forward_train(layer, Tensor(x), 0).data
        for c in (1.0, -3.5, 12.25):
            assert np.array_equal(dbn_forward_train(layer, Tensor(x + np.float32(c)), 1).data, base)


def test_scale_invariance_at_zero_eps():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
    layer = DomainBatchNorm(2, epsilon=0.0)
    base = dbn_forward_train(layer, Tensor(x), 0).data
    for k in (0.01, 3.0, 250.0):
        out = dbn_forward_train(layer, Tensor(x * np.float32(k)), 0).data
        np.testing.assert_allclose(out, base, atol=2e-6)


def test_output_statistics():
    rng = np.random.default_rng(6)
    for _ in range(10):
        scale = rng.uniform(np.sqrt(0.1), 3)
        x = (rng.normal(size=(4, 3, 5, 5)) * scale + rng.normal(size=(1, 3, 1, 1)) * 4).astype(np.float32)
        out = dbn_forward_train(DomainBatchNorm(3), Tensor(x), 0).data.astype(np.float64)
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-5)
        var = out.var(axis=(0, 2, 3))
        assert np.all((var >= 1 - 1e-3) & (var <= 1 + 1e-6))


def test_domain_isolation():
    rng = np.random.default_rng(7)
    layer = DomainBatchNorm(3, num_domains=4)
    for step in range(12):
        d = int(rng.integers(0, 4))
        before = layer.running_mean.copy(), layer.running_var.copy()
        dbn_forward_train(layer, Tensor(rng.normal(size=(2, 3, 2, 2)).astype(np.float32)), d)
        others = [k for k in range(4) if k != d]
        assert np.array_equal(layer.running_mean[others], before[0][others])
        assert np.array_equal(layer.running_var[others], before[1][others])
        assert np.all(layer.running_var >= 0)


def test_one_affine_pair_per_layer():
    layer = DomainBatchNorm(5, num_domains=7)
    assert [p.shape for p in layer.parameters()] == [(5,), (5,)]


def test_batch_mode_leaves_running_stats():
    layer = DomainBatchNorm(2, num_domains=2)
    x = Tensor(np.random.default_rng(8).normal(size=(2, 2, 3, 3)).astype(np.float32))
    out = layer(x, 1, "batch").data
    assert np.array_equal(layer.running_mean, np.zeros((2, 2))) and layer.updates.sum() == 0
    assert np.array_equal(out, bn_forward_train(layer.gamma, layer.beta, layer.epsilon, x).data)


def test_unseen_domain_falls_back_and_warns_once():
    layer = DomainBatchNorm(1, num_domains=3, name="n")
    layer.running_mean[:2, 0] = [1.0, 3.0]
    layer.running_var[:2, 0] = [2.0, 4.0]
    layer.updates[:2] = 1
    x = column([2.0, 2.0])
    with pytest.warns(UnseenDomainWarning):
        out = dbn_forward_eval(layer, x, 2).data
    np.testing.assert_allclose(out, 0.0, atol=1e-7)  # average mean is 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        dbn_forward_eval(layer, x, 2)


def test_domain_validation():
    layer = DomainBatchNorm(1, num_domains=2)
    x = column([1.0, 2.0])
    with pytest.raises(ValueError, match="out of range"):
        dbn_forward_train(layer, x, 2)
    with pytest.raises(ValueError, match="mixed-domain"):
        dbn_forward_train(layer, x, [0, 1])
    dbn_forward_train(layer, x, [1, 1])
    assert layer.updates.tolist() == [0, 1]
    with pytest.raises(ValueError):
        layer(x, 0, "sideways")
    with pytest.raises(ValueError):
        DomainBatchNorm(1, num_domains=0)


def test_state_round_trip():
    rng = np.random.default_rng(9)
    a = DomainBatchNorm(3, num_domains=2, name="x")
    for d in (0, 1, 1):
        a.forward_train(Tensor(rng.normal(size=(2, 3, 2, 2)).astype(np.float32)), d)
    b = DomainBatchNorm(3, num_domains=2, name="x")
    b.load_state(a.state())
    assert np.array_equal(a.running_mean, b.running_mean) and np.array_equal(a.running_var, b.running_var)
    assert b.updates.tolist() == [1, 2]
