import math

import numpy as np

from flowad import losses as L
from flowad.flow import FlowSampleBatch, fixed_base_stack
from flowad.rng import Rng
from flowad.tensor import Parameter, Tensor, check_gradients, no_grad


def test_focal_loss_values():
    assert abs(float(L.focal_loss(Tensor(np.ones(5))).data)) < 1e-10
    # gamma = 0 reduces to mean cross-entropy
    p = np.array([0.25, 0.5, 0.9])
    ce = -np.log(p).mean()
    assert abs(float(L.focal_loss(Tensor(p), gamma=0.0).data) - ce) < 1e-12
    # single pixel at one half with gamma 2: 0.25 * ln 2
    val = float(L.focal_loss(Tensor(np.array([0.5]))).data)
    assert abs(val - 0.25 * math.log(2.0)) < 1e-12
    assert abs(val - 0.173287) < 1e-6


def test_dice_loss_values():
    y = np.array([1.0, 1.0, 0.0, 0.0])
    assert abs(float(L.dice_loss(y, Tensor(y)).data)) < 1e-6  # perfect overlap
    yhat = np.full(4, 0.5)
    assert abs(float(L.dice_loss(y, Tensor(yhat)).data) - 0.5) < 1e-6
    zeros = np.zeros(4)
    assert abs(float(L.dice_loss(zeros, Tensor(zeros)).data)) < 1e-12  # eps guard


def test_cls_loss_values():
    probs = np.array([[0.0, 1.0], [0.5, 0.5]])
    labels = [1, 0]
    # first image perfectly classified (clamped at 1), second at one half
    perfect = float(L.cls_loss(Tensor(np.array([[0.0, 1.0]])), [1]).data)
    assert abs(perfect) < 1e-6
    half = float(L.cls_loss(Tensor(np.array([[0.5, 0.5]])), [0]).data)
    assert abs(half - math.log(2.0)) < 1e-9
    both = float(L.cls_loss(Tensor(probs), labels).data)
    assert abs(both - 0.5 * math.log(2.0)) < 1e-6
    assert abs(both - 0.346574) < 1e-5


def test_gaussian_elbo_values():
    assert abs(float(L.gaussian_elbo_reg(Tensor(np.zeros(3)), Tensor(np.ones(3))).data)) < 1e-12
    assert abs(float(L.gaussian_elbo_reg(Tensor(np.array([1.0])), Tensor(np.array([1.0]))).data) - 0.5) < 1e-12
    val = float(L.gaussian_elbo_reg(Tensor(np.array([1.0, 0.0])), Tensor(np.array([2.0, 1.0]))).data)
    expected = 0.5 * (4.0 + 1.0 - 1.0 - math.log(4.0))
    assert abs(val - expected) < 1e-12
    assert abs(val - 1.306853) < 1e-6


def test_flow_reg_zero_when_base_is_prior():
    stack = fixed_base_stack(np.zeros(2), np.ones(2), depth=0)
    phi = Rng(0).normal((3, 2))
    batch = stack.sample_rows(Tensor(np.zeros((3, 2))), Rng(5))
    val = float(L.flow_reg([batch]).data)
    # q0 equals the prior, so log q - log p vanishes sample by sample
    assert abs(val) < 1e-12


def test_flow_reg_matches_straightline_oracle():
    stack = fixed_base_stack(np.array([0.3, -0.2]), np.array([0.7, 1.3]), depth=2, rng=Rng(8))
    for layer in stack.layers:
        layer.u.data[...] = Rng(layer.b.name.__hash__() % 100).normal((2,))
    batch = stack.sample_rows(Tensor(np.zeros((4, 2))), Rng(17))
    val = float(L.flow_reg([batch]).data)

    # independent straight-line recomputation from the stored eps draws
    mu = np.array([0.3, -0.2])
    sigma = np.array([0.7, 1.3])
    total = 0.0
    for eps in batch.eps:
        p = mu + eps * sigma
        logq = -math.log(2 * math.pi) - np.log(sigma).sum() - 0.5 * float(((p - mu) / sigma) @ ((p - mu) / sigma))
        z = p.copy()
        for layer in stack.layers:
            u_hat = _u_hat_np(layer)
            pre = float(z @ layer.w.data + layer.b.data)
            logq -= math.log(max(abs(1.0 + (u_hat @ layer.w.data) * (1 - math.tanh(pre) ** 2)), 1e-6))
            z = z + u_hat * math.tanh(pre)
        logp = -math.log(2 * math.pi) - 0.5 * float(z @ z)
        total += logq - logp
    assert abs(val - total / 4.0) < 1e-12


def _u_hat_np(layer):
    u, w = layer.u.data, layer.w.data
    if not np.any(w):
        return u
    uw = float(u @ w)
    m = -1.0 + np.logaddexp(0.0, uw)
    return u + (m - uw) * w / float(w @ w)


def test_flow_reg_k0_matches_analytic_kl():
    rng = np.random.default_rng(3)
    for i in range(5):
        mu = rng.uniform(-0.5, 0.5, size=2)
        sigma = rng.uniform(0.5, 1.5, size=2)
        stack = fixed_base_stack(mu, sigma, depth=0)
        with no_grad():
            batch = stack.sample_rows(Tensor(np.zeros((100_000, 2))), Rng(23).child(i))
            mc = float(L.flow_reg([batch]).data)
        analytic = float(L.gaussian_elbo_reg(Tensor(mu), Tensor(sigma)).data)
        assert abs(mc - analytic) < 0.02


def test_total_loss_additivity_and_breakdown():
    parts = [Tensor(np.array(v)) for v in (0.1, 0.2, 0.3, 0.1, 0.05)]
    bd = L.total_loss(*parts)
    assert abs(float(bd.total.data) - 0.75) < 1e-12
    zero = [Tensor(np.zeros(())) for _ in range(5)]
    assert float(L.total_loss(*zero).total.data) == 0.0
    s = bd.scalars()
    assert s["total"] == float(bd.total.data)
    assert abs(s["l_ort"] - 0.1) < 1e-12


def test_total_loss_gradient_is_sum_of_part_gradients():
    p = Parameter(np.array([0.4, -0.3]), name="p")

    def part_grads():
        grads = []
        for fn in (lambda: (p * p).sum(), lambda: (p ** 3).sum()):
            p.grad = None
            fn().backward()
            grads.append(p.grad.copy())
        return grads

    g1, g2 = part_grads()
    p.grad = None
    zero = Tensor(np.zeros(()))
    bd = L.total_loss((p * p).sum(), (p ** 3).sum(), zero, zero, zero)
    bd.total.backward()
    assert np.abs(p.grad - (g1 + g2)).max() < 1e-12


def test_all_losses_gradcheck():
    rng = np.random.default_rng(5)
    m = Parameter(rng.uniform(0.1, 0.9, size=(4, 4)), name="map")
    probs_logits = Parameter(rng.normal(size=(3, 2)), name="logits")
    mu = Parameter(rng.normal(size=(2, 3)), name="mu")
    sigma_raw = Parameter(rng.normal(size=(2, 3)), name="sigma_raw")
    y = (rng.uniform(size=(4, 4)) > 0.5).astype(float)

    from flowad.tensor import softmax, softplus

    def objective():
        p_correct = m * Tensor(y) + (1.0 - m) * Tensor(1.0 - y)
        probs = softmax(probs_logits, axis=-1)
        return (
            L.focal_loss(p_correct)
            + L.dice_loss(y, m)
            + L.cls_loss(probs, [0, 1, 0])
            + L.gaussian_elbo_reg(mu, softplus(sigma_raw))
        )

    err = check_gradients(objective, [m, probs_logits, mu, sigma_raw], h=1e-5, max_entries=6)
    assert err < 1e-4
