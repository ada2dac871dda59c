"""Learnable two-class prompt banks, sample fusion, and the frozen text encoder.

A bank holds B independent prompt templates per polarity: P shared context
vectors and Q polarity-specific state vectors. Flow samples are broadcast-added
(context sample onto every context slot, state sample onto every state slot)
and the class embedding is appended, giving a (P+Q+1, C) token sequence for
the text encoder.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import Parameter, Tensor, concat, ensure, l2_normalize, softmax, tanh, tsum

BANK_INIT_STD = 0.02
CONTEXT_INIT_STD = 0.3  # context spread keeps the bank embeddings decorrelated from step 0
CLASS_EMBED_NORM = 0.1  # class-token magnitude, comparable to bank vectors
POS_EMBED_STD = 0.02
READOUT_GAIN = 20.0  # lifts embedding norms to ~1 so the RCA residual cannot drown them
OUTPUT_BIAS_NORM = 4.0  # shared output direction; keeps cosine spreads off the softmax rails

NORMAL = "normal"
ABNORMAL = "abnormal"

# The two polarities start from the same draw plus one shared offset axis:
# the normal/abnormal split begins small but with a single stable direction
# common to every bank, so the patch projections chase one target instead of
# B independent noise-driven ones. The axis is random, leaving an untrained
# model uninformative.
SYMMETRIC_POLARITY_INIT = True
POLARITY_OFFSET = 0.1


class PromptBank:
    """B sets of context vectors plus normal/abnormal state vectors."""

    def __init__(self, banks, ctx_len, state_len, dim, rng=None):
        if banks < 1 or ctx_len < 1 or state_len < 1:
            raise ConfigError("prompt bank needs banks >= 1, ctx_len >= 1, state_len >= 1")
        rng = rng or Rng(0)
        self.banks = banks
        self.ctx_len = ctx_len
        self.state_len = state_len
        self.dim = dim
        self.context = Parameter(
            rng.child(0).normal((banks, ctx_len, dim), CONTEXT_INIT_STD), name="bank.context"
        )
        state = rng.child(1).normal((banks, state_len, dim), BANK_INIT_STD)
        self.normal_state = Parameter(state.copy(), name="bank.normal_state")
        if not SYMMETRIC_POLARITY_INIT:
            state = rng.child(2).normal((banks, state_len, dim), BANK_INIT_STD)
        else:
            axis = rng.child(3).normal((dim,))
            state = state + POLARITY_OFFSET * axis / np.linalg.norm(axis)
        self.abnormal_state = Parameter(state.copy(), name="bank.abnormal_state")

    def parameters(self):
        return [self.context, self.normal_state, self.abnormal_state]


@dataclass
class ClassEmbedding:
    """Frozen embedding of the object-class token."""

    name: str
    vector: np.ndarray

    @classmethod
    def from_name(cls, name, dim):
        """Deterministic per-name vector from a seeded hash (no vocabulary file)."""
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        entropy = int.from_bytes(digest[:16], "little")
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
        raw = gen.standard_normal(dim)
        return cls(name=name, vector=CLASS_EMBED_NORM * raw / np.linalg.norm(raw))


def assemble_prompt(bank, index, ctx_sample, state_sample, cls_embedding, polarity):
    """Fuse flow samples into bank `index` and append the class token.

    Token layout: P context slots (each + ctx_sample), then Q state slots of
    the chosen polarity (each + state_sample), then the class vector.
    """
    if not 0 <= index < bank.banks:
        raise ValueError(f"bank index {index} out of range [0, {bank.banks})")
    if polarity == NORMAL:
        state = bank.normal_state
    elif polarity == ABNORMAL:
        state = bank.abnormal_state
    else:
        raise ValueError(f"polarity must be 'normal' or 'abnormal', got {polarity!r}")
    ctx_tokens = bank.context[index] + ensure(ctx_sample)
    state_tokens = state[index] + ensure(state_sample)
    cls_token = Tensor(cls_embedding.vector.reshape(1, -1))
    return concat([ctx_tokens, state_tokens, cls_token], axis=0)


class FrozenTextEncoder:
    """Interface: deterministic map (P+Q+1, C) tokens -> (C,) embedding.

    Implementations must be differentiable with respect to their *inputs*;
    their own weights never receive gradients.
    """

    dim: int

    def encode(self, tokens):
        raise NotImplementedError


class ToyTextEncoder(FrozenTextEncoder):
    """Seeded frozen reference encoder: two single-head attention blocks.

    Weights are drawn once from the given seed and stored as plain constants,
    so gradients flow to the token inputs only. Mean-pool readout plus a
    final linear map produce the embedding.
    """

    def __init__(self, dim, seed=0, max_len=64):
        self.dim = dim
        self.seed = seed
        rng = Rng(seed, path=(815,))
        scale = 1.0 / math.sqrt(dim)
        self.pos = rng.child(0).normal((max_len, dim), POS_EMBED_STD)
        self.blocks = []
        for i in range(2):
            br = rng.child(1 + i)
            self.blocks.append(
                {
                    "wq": Tensor(br.child(0).normal((dim, dim), scale)),
                    "wk": Tensor(br.child(1).normal((dim, dim), scale)),
                    "wv": Tensor(br.child(2).normal((dim, dim), scale)),
                    "wo": Tensor(br.child(3).normal((dim, dim), scale)),
                    "wf1": Tensor(br.child(4).normal((dim, dim), scale)),
                    "wf2": Tensor(br.child(5).normal((dim, dim), scale)),
                }
            )
        self.readout = Tensor(rng.child(9).normal((dim, dim), READOUT_GAIN * scale))
        bias_dir = rng.child(10).normal((dim,))
        self.out_bias = Tensor(OUTPUT_BIAS_NORM * bias_dir / np.linalg.norm(bias_dir))

    def encode(self, tokens):
        tokens = ensure(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise ValueError(f"token sequence must be (T, {self.dim}), got {tokens.shape}")
        n = tokens.shape[0]
        if n > self.pos.shape[0]:
            raise ConfigError(f"sequence length {n} exceeds encoder max_len {self.pos.shape[0]}")
        x = tokens + Tensor(self.pos[:n])
        inv_sqrt = 1.0 / math.sqrt(self.dim)
        for blk in self.blocks:
            q = x @ blk["wq"]
            k = x @ blk["wk"]
            v = x @ blk["wv"]
            attn = softmax((q @ k.T) * inv_sqrt, axis=-1)
            x = x + (attn @ v) @ blk["wo"]
            x = x + tanh(x @ blk["wf1"]) @ blk["wf2"]
        pooled = x.mean(axis=0)
        return pooled @ self.readout + self.out_bias


def encode_text(encoder, tokens):
    """Apply the frozen encoder; output is left unnormalized."""
    return encoder.encode(tokens)


@dataclass
class TextEmbeddingPair:
    """Normal/abnormal embeddings of one prompt; row order is fixed package-wide."""

    t_n: Tensor
    t_a: Tensor

    def as_matrix(self):
        """(2, C): row 0 normal, row 1 abnormal."""
        return concat([self.t_n.reshape(1, -1), self.t_a.reshape(1, -1)], axis=0)


def _cosine(a, b):
    return tsum(l2_normalize(a, axis=-1) * l2_normalize(b, axis=-1))


def orthogonal_loss(pairs):
    """Sum of squared pairwise cosines within each polarity, over ordered pairs.

    Zero-norm embeddings contribute cosine 0 (the normalize guard).
    """
    total = Tensor(np.zeros(()))
    n = len(pairs)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            total = total + _cosine(pairs[i].t_n, pairs[j].t_n) ** 2
            total = total + _cosine(pairs[i].t_a, pairs[j].t_a) ** 2
    return total
