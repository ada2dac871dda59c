"""Training objectives: flow regularization, classification, and segmentation.

All pieces return scalar tensors on the tape. The flow regularizer is the
single-sample Monte Carlo estimate of KL(q_K || prior); the analytic
Gaussian KL replaces it when the flow layers are bypassed (ablation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import std_normal_logpdf
from .tensor import Tensor, clamp, ensure, log, take, tmean, tsum

EPS_PROB = 1e-7
EPS_DICE = 1e-6
FOCAL_GAMMA = 2.0


@dataclass
class LossBreakdown:
    """The five objective parts and their sum, kept separately for logging."""

    l_ort: Tensor
    l_flow_reg: Tensor
    l_cls: Tensor
    l_focal: Tensor
    l_dice: Tensor
    total: Tensor

    def scalars(self):
        return {
            "l_ort": float(self.l_ort.data),
            "l_flow_reg": float(self.l_flow_reg.data),
            "l_cls": float(self.l_cls.data),
            "l_focal": float(self.l_focal.data),
            "l_dice": float(self.l_dice.data),
            "total": float(self.total.data),
        }


def flow_reg(sample_batches):
    """Monte Carlo estimate of E[log q_K(phi)] - E[log p(phi)], standard-normal prior.

    `sample_batches` holds one FlowSampleBatch per distribution (one sample per
    image row); the estimate is averaged over rows and over the batches.
    """
    total = Tensor(np.zeros(()))
    for batch in sample_batches:
        total = total + tmean(batch.log_q - std_normal_logpdf(batch.phi))
    return total * (1.0 / len(sample_batches))


def gaussian_elbo_reg(mu, sigma):
    """Analytic KL[N(mu, diag(sigma^2)) || N(0, I)], averaged over rows.

    Used in place of flow_reg when the planar layers are bypassed.
    """
    mu = ensure(mu)
    sigma = ensure(sigma)
    var = sigma * sigma
    kl = 0.5 * tsum(var + mu * mu - 1.0 - log(var), axis=-1)
    return tmean(kl) if kl.ndim else kl


def focal_loss(p_correct, gamma=FOCAL_GAMMA):
    """-(1/N) sum (1 - p_i)^gamma log p_i over per-pixel correct-class probabilities."""
    p = clamp(ensure(p_correct), lo=EPS_PROB, hi=1.0)
    return -tmean((1.0 - p) ** gamma * log(p))


def dice_loss(mask, predicted):
    """1 - (2|y.yhat| + eps) / (|y| + |yhat| + eps).

    The smoothing term appears in both numerator and denominator so the
    all-normal, all-clean case scores 0 instead of dividing by ~0.
    """
    y = np.asarray(mask, dtype=np.float64)
    yhat = ensure(predicted)
    inter = tsum(yhat * Tensor(y))
    denom = tsum(yhat) + float(y.sum()) + EPS_DICE
    return 1.0 - (2.0 * inter + EPS_DICE) / denom


def cls_loss(probs, labels):
    """Mean cross-entropy of per-image two-way probabilities against labels."""
    probs = ensure(probs)
    labels = np.asarray(labels, dtype=np.int64)
    picked = take(probs, (np.arange(labels.shape[0]), labels))
    return -tmean(log(clamp(picked, lo=EPS_PROB, hi=1.0)))


def total_loss(l_ort, l_flow_reg, l_cls, l_focal, l_dice):
    """Plain unweighted sum, with the parts preserved for the step log."""
    total = l_ort + l_flow_reg + l_cls + l_focal + l_dice
    return LossBreakdown(
        l_ort=ensure(l_ort),
        l_flow_reg=ensure(l_flow_reg),
        l_cls=ensure(l_cls),
        l_focal=ensure(l_focal),
        l_dice=ensure(l_dice),
        total=total,
    )
