"""Patch projection, residual cross-modal attention, and map/score assembly.

Raw patch features are mapped into the joint text-image space by one
bias-free linear layer per encoder layer. Text embeddings attend over patch
features (residually) before cosine alignment; per-layer logit grids are
bilinearly upsampled (align-corners) and softmaxed into two-channel
probability maps whose abnormal channel is the anomaly map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rng import Rng
from .tensor import (
    Parameter,
    Tensor,
    bilinear_upsample,
    concat,
    ensure,
    l2_normalize,
    softmax,
    tmax,
    tmean,
)

DEFAULT_LOGIT_SCALE = 100.0


class PatchProjection:
    """Bias-free D_raw -> C maps, one per extracted encoder layer."""

    def __init__(self, n_layers, raw_dim, dim, rng=None):
        rng = rng or Rng(0)
        self.raw_dim = raw_dim
        self.dim = dim
        self.weights = [
            Parameter(rng.child(i).normal((raw_dim, dim), 1.0 / math.sqrt(raw_dim)),
                      name=f"proj.layer{i}")
            for i in range(n_layers)
        ]

    @property
    def n_layers(self):
        return len(self.weights)

    def parameters(self):
        return list(self.weights)

    def project(self, raw, layer):
        """(HW, D_raw) raw features of one layer -> (HW, C)."""
        raw = ensure(raw)
        if raw.shape[-1] != self.raw_dim:
            raise DataError(
                f"raw feature width {raw.shape[-1]} does not match projection width {self.raw_dim}",
                code="shape_mismatch",
            )
        return raw @ self.weights[layer]


def project_patches(raw, projection, layer):
    return projection.project(raw, layer)


class RcaWeights:
    """Query projection of the residual cross-modal attention; shared across layers."""

    def __init__(self, dim, rng=None):
        rng = rng or Rng(0)
        self.W = Parameter(rng.normal((dim, dim), 0.01 / math.sqrt(dim)), name="rca.W")  # near-uniform attention start

    def parameters(self):
        return [self.W]


def rca_refine(zt, f_img, rca):
    """Residual attention of text rows over patch rows.

    zt (2, C) text embeddings, f_img (HW, C) patch features:
    output = zt + softmax((zt W) f_img^T / sqrt(C)) f_img.
    """
    zt = ensure(zt)
    f_img = ensure(f_img)
    dim = zt.shape[-1]
    q = zt @ rca.W
    logits = (q @ f_img.T) * (1.0 / math.sqrt(dim))
    attn = softmax(logits, axis=-1)
    return zt + attn @ f_img


def layer_anomaly_map(f_img, f_txt, out_h, out_w, grid_h=None, grid_w=None,
                      logit_scale=DEFAULT_LOGIT_SCALE):
    """Two-way cosine alignment of one layer, upsampled then softmaxed.

    Returns the abnormal-channel probability map at (out_h, out_w). The
    upsample happens on logits, before the per-pixel softmax.
    """
    f_img = ensure(f_img)
    f_txt = ensure(f_txt)
    hw = f_img.shape[0]
    if grid_h is None:
        grid_h = int(round(math.sqrt(hw)))
        grid_w = hw // grid_h
    logits = (l2_normalize(f_img, axis=-1) @ l2_normalize(f_txt, axis=-1).T) * logit_scale
    grid = logits.reshape(grid_h, grid_w, 2)
    up = bilinear_upsample(grid, out_h, out_w)
    probs = softmax(up, axis=-1)
    return probs[:, :, 1]


def aggregate(maps):
    """Arithmetic mean of equally shaped anomaly maps."""
    if not maps:
        raise ValueError("aggregate() needs at least one map")
    total = maps[0]
    for m in maps[1:]:
        total = total + m
    return total * (1.0 / len(maps))


@dataclass
class GlobalEmbedding:
    """Class-token feature, fused patch feature, and their sum."""

    x_cls: Tensor
    x_patch: Tensor
    x: Tensor


def global_embedding(x_cls, projected_layers, fusion_weight):
    """Fuse per-layer patch features into a global image embedding.

    Concatenate the L projected (HW, C) maps channel-wise, average over the
    spatial positions, and apply the bias-free (L*C, C) fusion layer; the
    global embedding is x_cls plus that fused vector.
    """
    x_cls = ensure(x_cls)
    stacked = concat(list(projected_layers), axis=1)  # (HW, L*C)
    pooled = tmean(stacked, axis=0)  # (L*C,)
    x_patch = pooled @ fusion_weight
    return GlobalEmbedding(x_cls=x_cls, x_patch=x_patch, x=x_cls + x_patch)


def text_image_probs(x, zt, logit_scale=DEFAULT_LOGIT_SCALE):
    """(normal, abnormal) softmax probabilities of the global embedding."""
    sims = (l2_normalize(x, axis=-1) @ l2_normalize(zt, axis=-1).T) * logit_scale
    return softmax(sims, axis=-1)


def image_score(x, zt_list, agg_map, logit_scale=DEFAULT_LOGIT_SCALE):
    """Image-level anomaly score: text-branch mean plus map maximum.

    Returns (s, s_text, s_img) with s = s_text + s_img in [0, 2].
    """
    if not zt_list:
        raise ValueError("image_score() needs at least one text embedding pair")
    probs = [text_image_probs(x, zt, logit_scale)[1] for zt in zt_list]
    s_text = aggregate(probs)
    s_img = tmax(ensure(agg_map))
    return s_text + s_img, s_text, s_img
