"""The full detector: prompt banks, flow, projections, attention, scoring.

Holds every trainable Parameter plus the frozen text encoder, and provides
the per-image forward pieces that the training loop and inference assemble.
Construction is fully determined by (meta, init_seed), which is what the
checkpoint stores.
"""

from __future__ import annotations

import math

import numpy as np

from .align import (
    DEFAULT_LOGIT_SCALE,
    PatchProjection,
    RcaWeights,
    global_embedding,
    layer_anomaly_map,
    rca_refine,
)
from .flow import KIND_ABNORMAL_FREE, KIND_IMAGE, KIND_NORMAL_FREE, ConditionVector, FlowStack
from .prompts import (
    ABNORMAL,
    NORMAL,
    SYMMETRIC_POLARITY_INIT,
    ClassEmbedding,
    PromptBank,
    TextEmbeddingPair,
    ToyTextEncoder,
    assemble_prompt,
    encode_text,
)
from .rng import Rng
from .tensor import Parameter, Tensor

FREE_VECTOR_STD = 0.02


class PromptFlowModel:
    """All trainable state of the detector, addressable by parameter name."""

    def __init__(self, dim, raw_dim, n_layers, banks, ctx_len, state_len, flow_depth,
                 logit_scale=DEFAULT_LOGIT_SCALE, encoder_seed=0, init_seed=0):
        self.dim = dim
        self.raw_dim = raw_dim
        self.n_layers = n_layers
        self.banks = banks
        self.ctx_len = ctx_len
        self.state_len = state_len
        self.flow_depth = flow_depth
        self.logit_scale = float(logit_scale)
        self.encoder_seed = encoder_seed
        self.init_seed = init_seed

        rng = Rng(init_seed, path=(7,))
        self.flow = FlowStack.build(dim, flow_depth, rng.child(0))
        self.bank = PromptBank(banks, ctx_len, state_len, dim, rng.child(1))
        self.projection = PatchProjection(n_layers, raw_dim, dim, rng.child(2))
        self.rca = RcaWeights(dim, rng.child(3))
        self.fusion = Parameter(
            rng.child(4).normal((n_layers * dim, dim), 1.0 / math.sqrt(n_layers * dim)),
            name="fusion.weight",
        )
        self.cls_proj = Parameter(
            rng.child(5).normal((raw_dim, dim), 1.0 / math.sqrt(raw_dim)),
            name="cls_proj.weight",
        )
        free = rng.child(6).normal((dim,), FREE_VECTOR_STD)
        self.free_normal = Parameter(free.copy(), name="free.normal")
        if not SYMMETRIC_POLARITY_INIT:
            free = rng.child(7).normal((dim,), FREE_VECTOR_STD)
        self.free_abnormal = Parameter(free.copy(), name="free.abnormal")
        self.encoder = ToyTextEncoder(dim, seed=encoder_seed)
        self._class_cache = {}

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self):
        out = []
        out.extend(self.flow.parameters())
        out.extend(self.bank.parameters())
        out.extend(self.projection.parameters())
        out.extend(self.rca.parameters())
        out.extend([self.fusion, self.cls_proj, self.free_normal, self.free_abnormal])
        return out

    def named_parameters(self):
        params = {}
        for p in self.parameters():
            if p.name in params:
                raise AssertionError(f"duplicate parameter name {p.name}")
            params[p.name] = p
        return params

    def meta(self):
        return {
            "dim": self.dim,
            "raw_dim": self.raw_dim,
            "n_layers": self.n_layers,
            "banks": self.banks,
            "ctx_len": self.ctx_len,
            "state_len": self.state_len,
            "flow_depth": self.flow_depth,
            "logit_scale": self.logit_scale,
            "encoder_seed": self.encoder_seed,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_meta(cls, meta):
        meta = dict(meta)
        for key in ("dim", "raw_dim", "n_layers", "banks", "ctx_len", "state_len",
                    "flow_depth", "encoder_seed", "init_seed"):
            meta[key] = int(meta[key])
        meta["logit_scale"] = float(meta["logit_scale"])
        return cls(**meta)

    def class_embedding(self, name):
        if name not in self._class_cache:
            self._class_cache[name] = ClassEmbedding.from_name(name, self.dim)
        return self._class_cache[name]

    # -- per-image forward pieces ---------------------------------------------

    def project_record(self, layer_feats):
        """Project each layer's (HW, D_raw) raw features into the joint space."""
        return [self.projection.project(Tensor(raw), i) for i, raw in enumerate(layer_feats)]

    def global_embed(self, x_cls_raw, projected):
        """Joint-space global embedding from the raw class token and patch features."""
        x_cls = Tensor(np.asarray(x_cls_raw, dtype=np.float64)) @ self.cls_proj
        return global_embedding(x_cls, projected, self.fusion)

    def conditions(self, x):
        return {
            "ctx": ConditionVector(xi=x, kind=KIND_IMAGE),
            "normal": ConditionVector(xi=self.free_normal, kind=KIND_NORMAL_FREE),
            "abnormal": ConditionVector(xi=self.free_abnormal, kind=KIND_ABNORMAL_FREE),
        }

    def sample_distributions(self, x_rows, rng):
        """One sample per row from each of the three prompt distributions.

        x_rows is the (N, C) matrix of per-image global embeddings; the two
        image-agnostic distributions are conditioned on the learnable free
        vectors broadcast to the same row count.
        """
        ones = Tensor(np.ones((x_rows.shape[0], 1)))
        return {
            "ctx": self.flow.sample_rows(x_rows, rng.child(0)),
            "normal": self.flow.sample_rows(self.free_normal.reshape(1, -1) * ones, rng.child(1)),
            "abnormal": self.flow.sample_rows(self.free_abnormal.reshape(1, -1) * ones, rng.child(2)),
        }

    def text_pair(self, bank_idx, ctx_phi, normal_phi, abnormal_phi, cls_emb):
        """Encode the normal/abnormal prompts of one bank with the given samples."""
        tok_n = assemble_prompt(self.bank, bank_idx, ctx_phi, normal_phi, cls_emb, NORMAL)
        tok_a = assemble_prompt(self.bank, bank_idx, ctx_phi, abnormal_phi, cls_emb, ABNORMAL)
        return TextEmbeddingPair(
            t_n=encode_text(self.encoder, tok_n),
            t_a=encode_text(self.encoder, tok_a),
        )

    def layer_maps(self, projected, zt, grid_hw, out_hw):
        """Per-layer anomaly maps for one text pair; RCA refinement included."""
        grid_h, grid_w = grid_hw
        out_h, out_w = out_hw
        maps = []
        for f_img in projected:
            f_txt = rca_refine(zt, f_img, self.rca)
            maps.append(
                layer_anomaly_map(
                    f_img, f_txt, out_h, out_w,
                    grid_h=grid_h, grid_w=grid_w, logit_scale=self.logit_scale,
                )
            )
        return maps
