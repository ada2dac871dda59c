import numpy as np
import pytest

from flowad import tensor as T
from flowad.errors import ConfigError, NumericError
from flowad.rng import Rng


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        d = np.zeros_like(x).reshape(-1)
        d[i] = h
        d = d.reshape(x.shape)
        g.reshape(-1)[i] = (f(x + d) - f(x - d)) / (2 * h)
    return g


def test_l2_normalize_examples():
    out = T.l2_normalize(T.Tensor([3.0, 4.0]), axis=0)
    assert np.allclose(out.data, [0.6, 0.8], atol=1e-12)
    e1 = np.array([1.0, 0.0, 0.0])
    assert np.allclose(T.l2_normalize(T.Tensor(e1), axis=0).data, e1, atol=1e-12)
    assert np.allclose(T.l2_normalize(T.Tensor([0.0, 0.0]), axis=0).data, [0.0, 0.0])


def test_l2_normalize_unit_norm_property():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7))
    out = T.l2_normalize(T.Tensor(x), axis=1)
    norms = np.linalg.norm(out.data, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-12


def test_softmax_examples():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5], atol=1e-15)
    base = T.softmax(T.Tensor([1.0, 2.0]), axis=0).data
    shifted = T.softmax(T.Tensor([101.0, 102.0]), axis=0).data
    assert np.allclose(base, shifted, atol=1e-12)
    out = T.softmax(T.Tensor([1.0, 2.0, 3.0]), axis=0).data
    assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 9)) * 50
    out = T.softmax(T.Tensor(x), axis=1).data
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12


def test_activation_dispatch():
    assert T.activation("tanh", T.Tensor(0.0)).data == 0.0
    assert abs(T.activation("softplus", T.Tensor(0.0)).data - 0.693147) < 1e-6
    with pytest.raises(ConfigError):
        T.activation("relu", T.Tensor(0.0))


def test_softplus_overflow_safe():
    big = T.softplus(T.Tensor([800.0, -800.0]))
    assert np.isfinite(big.data).all()
    assert abs(big.data[0] - 800.0) < 1e-9
    assert big.data[1] >= 0.0


def test_tanh_derivative_at_zero():
    x = T.Parameter(np.zeros(()))
    y = T.tanh(x)
    y.backward()
    assert abs(x.grad - 1.0) < 1e-12


def test_check_gradients_quadratic():
    x = T.Parameter(np.array(3.0), name="x")
    err = T.check_gradients(lambda: x * x, [x], h=1e-5)
    assert err < 1e-8


def test_check_gradients_tanh():
    x = T.Parameter(np.zeros(()), name="x")
    err = T.check_gradients(lambda: T.tanh(x), [x], h=1e-5)
    assert err < 1e-8


def test_check_gradients_nonfinite_diagnostic():
    x = T.Parameter(np.array(0.0), name="badparam")
    with pytest.raises(NumericError):
        T.check_gradients(lambda: T.log(x), [x], h=1e-5)


@pytest.mark.parametrize("op,ref", [
    (lambda t: T.tsum(T.exp(t)), lambda x: np.exp(x).sum()),
    (lambda t: T.tsum(T.log(t + 3.0)), lambda x: np.log(x + 3.0).sum()),
    (lambda t: T.tsum(T.softplus(t) * T.tanh(t)), lambda x: (np.logaddexp(0, x) * np.tanh(x)).sum()),
    (lambda t: T.tsum(T.tabs(t)), lambda x: np.abs(x).sum()),
    (lambda t: T.tmean(t * t, axis=0).sum(), lambda x: (x * x).mean(axis=0).sum()),
    (lambda t: T.tsum(T.softmax(t, axis=1) ** 2), lambda x: None),
    (lambda t: T.tsum(T.l2_normalize(t, axis=1) ** 3), lambda x: None),
])
def test_elementwise_grads_match_fd(op, ref):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4)) + 0.1
    p = T.Parameter(x.copy(), name="p")
    if ref(x) is not None:
        assert abs(float(op(p).data) - ref(x)) < 1e-10
    err = T.check_gradients(lambda: op(p), [p], h=1e-6)
    assert err < 1e-7


def test_matmul_grads_all_arities():
    rng = np.random.default_rng(5)
    a = T.Parameter(rng.normal(size=(3, 4)), name="a")
    b = T.Parameter(rng.normal(size=(4, 2)), name="b")
    v = T.Parameter(rng.normal(size=4), name="v")
    err = T.check_gradients(lambda: T.tsum((a @ b) ** 2), [a, b], h=1e-6)
    assert err < 1e-8
    err = T.check_gradients(lambda: T.tsum((a @ v) ** 2), [a, v], h=1e-6)
    assert err < 1e-8
    err = T.check_gradients(lambda: T.tsum((v @ b) ** 2), [v, b], h=1e-6)
    assert err < 1e-8


def test_take_concat_reshape_grads():
    rng = np.random.default_rng(6)
    p = T.Parameter(rng.normal(size=(4, 3)), name="p")

    def f():
        row = p[1]
        cat = T.concat([row.reshape(1, -1), (p[2] * 2.0).reshape(1, -1)], axis=0)
        return T.tsum(cat ** 2)

    assert T.check_gradients(f, [p], h=1e-6) < 1e-8


def test_bilinear_upsample_grad():
    rng = np.random.default_rng(8)
    p = T.Parameter(rng.normal(size=(3, 3, 2)), name="grid")
    f = lambda: T.tsum(T.bilinear_upsample(p, 7, 5) ** 2)
    assert T.check_gradients(f, [p], h=1e-6) < 1e-7


def test_clamp_grad_masks_out_of_range():
    p = T.Parameter(np.array([0.5, 2.0, -1.0]), name="p")
    out = T.tsum(T.clamp(p, lo=0.0, hi=1.0) * np.array([1.0, 1.0, 1.0]))
    out.backward()
    assert np.allclose(p.grad, [1.0, 0.0, 0.0])


def test_max_routes_gradient_to_argmax():
    p = T.Parameter(np.array([1.0, 5.0, 3.0]), name="p")
    T.tmax(p).backward()
    assert np.allclose(p.grad, [0.0, 1.0, 0.0])


def test_no_grad_blocks_tape():
    p = T.Parameter(np.ones(3), name="p")
    with T.no_grad():
        out = T.tsum(p * p)
    assert not out.requires_grad


def test_rng_reproducible_and_splittable():
    a = Rng(123)
    b = Rng(123)
    assert np.array_equal(a.normal((8,)), b.normal((8,)))
    assert np.array_equal(a.integers(0, 100, (5,)), b.integers(0, 100, (5,)))
    # child streams do not depend on parent consumption
    c1 = Rng(123).child(3).normal((4,))
    parent = Rng(123)
    parent.normal((100,))
    c2 = parent.child(3).normal((4,))
    assert np.array_equal(c1, c2)
    assert not np.array_equal(Rng(123).child(1).normal((4,)), Rng(123).child(2).normal((4,)))


def test_parameter_zero_grad():
    p = T.Parameter(np.ones((2, 2)), name="p")
    T.tsum(p * p).backward()
    assert p.grad is not None and p.grad.max() > 0
    p.zero_grad()
    assert np.all(p.grad == 0)
