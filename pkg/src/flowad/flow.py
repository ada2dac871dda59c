"""Conditional planar flow over prompt vectors.

A diagonal-Gaussian base distribution N(mu(xi), diag(sigma(xi)^2)) is produced
by two small conditioning nets, then pushed through K invertible planar
layers h(z) = z + u_hat * tanh(w.z + b). Sampling uses the standard
reparameterization (z = mu + eps * sigma) so gradients reach every parameter
and, for the image-conditioned case, the condition vector itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import (
    Parameter,
    Tensor,
    clamp,
    ensure,
    log,
    softplus,
    tabs,
    tanh,
    tsum,
)

LOG_2PI = math.log(2.0 * math.pi)
EPS_DET = 1e-6

# Condition kinds: which vector the base distribution is conditioned on.
KIND_IMAGE = "image"  # per-image global feature (dynamic)
KIND_NORMAL_FREE = "normal_free"  # learnable free vector, normal states
KIND_ABNORMAL_FREE = "abnormal_free"  # learnable free vector, abnormal states


@dataclass
class ConditionVector:
    xi: Tensor
    kind: str


class PlanarLayer:
    """One invertible planar transform with parameters u, w, b."""

    def __init__(self, dim, rng=None, prefix="planar"):
        rng = rng or Rng(0)
        scale = 1.0 / math.sqrt(dim)
        self.u = Parameter(rng.normal((dim,), 0.1 * scale), name=f"{prefix}.u")
        self.w = Parameter(rng.normal((dim,), scale), name=f"{prefix}.w")
        self.b = Parameter(np.zeros(()), name=f"{prefix}.b")

    def parameters(self):
        return [self.u, self.w, self.b]

    def u_hat(self):
        """Effective direction after the invertibility reparameterization.

        u_hat.w = -1 + softplus(u.w) >= -1 always, which keeps
        z -> z + u_hat*tanh(w.z+b) injective. With w = 0 the transform is a
        constant shift and u is returned unchanged.
        """
        if not np.any(self.w.data):
            return self.u
        uw = tsum(self.u * self.w)
        m = softplus(uw) - 1.0
        wnorm2 = tsum(self.w * self.w)
        return self.u + ((m - uw) / wnorm2) * self.w

    def forward(self, phi):
        """Apply the transform to rows of phi (N, C)."""
        pre = tanh(phi @ self.w + self.b)  # (N,)
        return phi + pre.reshape(-1, 1) * self.u_hat()

    def log_det_term(self, phi):
        """log |1 + u_hat . psi(phi)| per row, evaluated at the layer input.

        psi(phi) = tanh'(w.phi + b) * w, so the inner product collapses to
        (u_hat.w) * tanh'(pre). Clamped below at EPS_DET to keep the value
        finite for near-singular layers.
        """
        pre = phi @ self.w + self.b  # (N,)
        t = tanh(pre)
        gprime = 1.0 - t * t
        uhw = tsum(self.u_hat() * self.w)
        inner = 1.0 + uhw * gprime
        return log(clamp(tabs(inner), lo=EPS_DET))


def enforce_invertibility(layer):
    """Expose the layer's effective u_hat (see PlanarLayer.u_hat)."""
    return layer.u_hat()


def planar_forward(phi, layer):
    phi = ensure(phi)
    if phi.ndim == 1:
        return layer.forward(phi.reshape(1, -1)).reshape(-1)
    return layer.forward(phi)


def log_det_term(phi, layer):
    phi = ensure(phi)
    if phi.ndim == 1:
        return layer.log_det_term(phi.reshape(1, -1)).reshape(())
    return layer.log_det_term(phi)


MU_HEAD_INIT = 0.01  # final-layer weight scale of the mean head
SIGMA_INIT = 0.005  # softplus(final bias) of the scale head at init


class _Head:
    """Three linear layers with softplus between consecutive ones.

    The final layer starts near a constant (`out_scale` small, bias
    `out_bias`): sampled prompts then begin tight around the banks instead of
    drowning them in noise, and the conditioning grows in during training.
    """

    def __init__(self, dim, rng, prefix, out_scale=MU_HEAD_INIT, out_bias=0.0):
        scale = 1.0 / math.sqrt(dim)
        # first layer starts small too: it damps the regularizer's gradient
        # leaking into the condition vector (and the vision weights behind it)
        self.weights = [Parameter(rng.normal((dim, dim), 0.1 * scale), name=f"{prefix}.w0")]
        self.biases = [Parameter(np.zeros(dim), name=f"{prefix}.b0")]
        self.weights.append(Parameter(rng.normal((dim, dim), scale), name=f"{prefix}.w1"))
        self.biases.append(Parameter(np.zeros(dim), name=f"{prefix}.b1"))
        self.weights.append(
            Parameter(rng.normal((dim, dim), out_scale * scale), name=f"{prefix}.w2")
        )
        self.biases.append(Parameter(np.full(dim, float(out_bias)), name=f"{prefix}.b2"))

    def parameters(self):
        return self.weights + self.biases

    def __call__(self, xi):
        h = xi @ self.weights[0] + self.biases[0]
        h = softplus(h)
        h = h @ self.weights[1] + self.biases[1]
        h = softplus(h)
        return h @ self.weights[2] + self.biases[2]


class BaseNet:
    """Condition nets producing the base mean and (strictly positive) scale."""

    def __init__(self, dim, rng=None, prefix="base"):
        rng = rng or Rng(0)
        self.dim = dim
        self.mu_net = _Head(dim, rng.child(0), f"{prefix}.mu")
        self.sigma_net = _Head(
            dim, rng.child(1), f"{prefix}.sigma", out_bias=_softplus_inv(SIGMA_INIT)
        )

    def parameters(self):
        return self.mu_net.parameters() + self.sigma_net.parameters()

    def __call__(self, xi):
        """(N, C) condition rows -> (mu, sigma), sigma = softplus(head) > 0."""
        if xi.shape[-1] != self.dim:
            raise ConfigError(
                f"condition dimension {xi.shape[-1]} != base net dimension {self.dim}"
            )
        return self.mu_net(xi), softplus(self.sigma_net(xi))


@dataclass
class FlowSample:
    """One sampled prompt vector with its flow log-density and noise draw."""

    phi: Tensor  # (C,)
    log_q: Tensor  # scalar
    eps: np.ndarray  # (C,) standard-normal draw that produced it


@dataclass
class FlowSampleBatch:
    """Row-wise samples: phi (N, C), log_q (N,), eps (N, C)."""

    phi: Tensor
    log_q: Tensor
    eps: np.ndarray

    def __len__(self):
        return self.phi.shape[0]

    def rows(self):
        return [FlowSample(self.phi[i], self.log_q[i], self.eps[i]) for i in range(len(self))]


class FlowStack:
    """Base distribution plus K planar layers."""

    def __init__(self, base, layers):
        self.base = base
        self.layers = list(layers)

    @classmethod
    def build(cls, dim, depth, rng=None, prefix="flow"):
        rng = rng or Rng(0)
        base = BaseNet(dim, rng.child(0), prefix=f"{prefix}.base")
        layers = [PlanarLayer(dim, rng.child(1 + k), prefix=f"{prefix}.layer{k}") for k in range(depth)]
        return cls(base, layers)

    @property
    def depth(self):
        return len(self.layers)

    def parameters(self):
        out = self.base.parameters()
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def base_distribution(self, xi):
        xi = ensure(xi)
        squeeze = xi.ndim == 1
        if squeeze:
            xi = xi.reshape(1, -1)
        mu, sigma = self.base(xi)
        if squeeze:
            return mu.reshape(-1), sigma.reshape(-1)
        return mu, sigma

    def transform(self, p):
        """Push rows (N, C) through all layers; returns (phi, total_log_det)."""
        p = ensure(p)
        total = Tensor(np.zeros(p.shape[0]))
        for layer in self.layers:
            total = total + layer.log_det_term(p)
            p = layer.forward(p)
        return p, total

    def sample_rows(self, xi, rng):
        """One reparameterized sample per condition row; xi is (N, C)."""
        xi = ensure(xi)
        mu, sigma = self.base(xi)
        eps = rng.normal(xi.shape)
        p = mu + Tensor(eps) * sigma
        # log q0 at p; written in terms of the tape so d log_q flows into
        # mu, sigma and (for image conditioning) xi itself.
        z = (p - mu) / sigma
        log_q0 = -0.5 * xi.shape[1] * LOG_2PI - tsum(log(sigma), axis=1) - 0.5 * tsum(z * z, axis=1)
        phi, log_det = self.transform(p)
        return FlowSampleBatch(phi=phi, log_q=log_q0 - log_det, eps=eps)


def sample(stack, xi, count, rng):
    """Draw `count` samples conditioned on a single xi vector.

    Returns a list of FlowSample; gradients flow through mu, sigma, the
    planar parameters, and xi.
    """
    if count < 1:
        raise ValueError(f"sample count must be >= 1, got {count}")
    xi = ensure(xi)
    if xi.ndim != 1:
        raise ConfigError("sample() expects a single condition vector")
    tiled = xi.reshape(1, -1) * Tensor(np.ones((count, 1)))
    return stack.sample_rows(tiled, rng).rows()


def std_normal_logpdf(phi):
    """log N(phi; 0, I) per row of an (N, C) tensor (the flow prior)."""
    phi = ensure(phi)
    dim = phi.shape[-1]
    return -0.5 * dim * LOG_2PI - 0.5 * tsum(phi * phi, axis=-1)


def gaussian_logpdf(p, mu, sigma):
    """Diagonal-Gaussian log-density per row; sigma holds stddevs."""
    p, mu, sigma = ensure(p), ensure(mu), ensure(sigma)
    dim = p.shape[-1]
    z = (p - mu) / sigma
    return -0.5 * dim * LOG_2PI - tsum(log(sigma), axis=-1) - 0.5 * tsum(z * z, axis=-1)


def fixed_base_stack(mu, sigma, depth=0, dim=None, rng=None):
    """FlowStack whose base ignores xi and returns the given (mu, sigma).

    Handy for controlled tests: final-layer weights are zeroed and biases set
    so mu_net = mu and softplus(sigma_head) = sigma exactly.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    dim = dim or mu.shape[0]
    stack = FlowStack.build(dim, depth, rng=rng or Rng(0))
    for head, target in ((stack.base.mu_net, mu), (stack.base.sigma_net, _softplus_inv(sigma))):
        head.weights[2].data[:] = 0.0
        head.biases[2].data[:] = target
    return stack


def _softplus_inv(y):
    # inverse of ln(1+e^x); y must be > 0
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))
