"""Masked multi-head attention and the pre-norm transformer block."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .topology import SparseTopology

TRAIN, EVAL = "train", "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


def _normal(rng, shape, std, name):
    return T.parameter(rng.normal(0.0, std, shape), name=name)


@dataclass(eq=False)
class AttentionParams:
    """Q/K/V projections; weights are ``d x d`` and act as ``H @ W + b``."""

    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    b_q: T.Tensor
    b_k: T.Tensor
    b_v: T.Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for t in (self.w_q, self.w_k, self.w_v):
            if t.shape != (d, d):
                raise DimensionError(f"projection shape {t.shape} != ({d}, {d})")
        if self.heads < 1 or d % self.heads:
            raise ConfigurationError(f"hidden size {d} not divisible by {self.heads} heads")

    @property
    def d(self):
        return self.w_q.shape[0]

    def tensors(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "heads"}

    @classmethod
    def init(cls, d, heads, rng, prefix="attn"):
        std = 1.0 / np.sqrt(d)
        return cls(
            *(_normal(rng, (d, d), std, f"{prefix}.w_{c}") for c in "qkv"),
            *(T.parameter(np.zeros(d), name=f"{prefix}.b_{c}") for c in "qkv"),
            heads=heads,
        )

    def copy(self, prefix):
        """Independent parameters initialised to the current values."""
        new = {k: T.parameter(v.data.copy(), name=f"{prefix}.{k}") for k, v in self.tensors().items()}
        return AttentionParams(**new, heads=self.heads)


@dataclass
class AttentionOutput:
    values: T.Tensor
    weights: np.ndarray | None = None


def effective_mask(topo, n, key_valid=None):
    """Boolean mask broadcastable to ``[b, heads, n, n]``.

    Invalid (padding) keys are removed, but every row keeps its diagonal so
    that padding rows stay well defined.
    """
    if topo is None:
        base = np.ones((n, n), dtype=bool)
    elif isinstance(topo, SparseTopology):
        if topo.n != n:
            raise DimensionError(f"topology covers {topo.n} tokens, input has {n}")
        base = topo.mask
    else:
        base = np.asarray(topo, dtype=bool)
        if base.shape != (n, n):
            raise DimensionError(f"mask shape {base.shape} != ({n}, {n})")
    if key_valid is None:
        return base
    key_valid = np.asarray(key_valid, dtype=bool)
    eye = np.eye(n, dtype=bool)
    return (base[None] & (key_valid[:, None, :] | eye[None]))[:, None]


def _split_heads(x, heads):
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _blocked(topo):
    return isinstance(topo, SparseTopology) and topo.is_block_structured


def _blocked_attention(q, k, v, topo, key_valid, c, attn_dropout, rng, training):
    """Same result as the masked dense product for a global + local-block layout.

    Global rows score every key; each block row scores the global keys and
    its own block only, so the work is ``O(g n + m bl^2)`` instead of ``n^2``.
    """
    b, h, n, dh = q.shape
    g, m, bl = topo.g, topo.m, topo.block_len
    kv = np.ones((b, n), dtype=bool) if key_valid is None else np.asarray(key_valid, dtype=bool)
    every = (slice(None), slice(None))
    parts = []
    if g:
        s = T.scale(T.matmul(T.take(q, every + (slice(0, g),)), T.swapaxes(k, -1, -2)), c)
        own = np.arange(n)[None, :] == np.arange(g)[:, None]
        p = T.softmax_rows(s, (kv[:, None, :] | own[None])[:, None])
        parts.append(T.matmul(T.dropout(p, attn_dropout, rng, training), v))

    loc = every + (slice(g, n),)
    ql, kl, vl = (T.reshape(T.take(x, loc), (b, h, m, bl, dh)) for x in (q, k, v))
    s = T.matmul(ql, T.swapaxes(kl, -1, -2))
    mask = kv[:, g:].reshape(b, m, 1, bl) | np.eye(bl, dtype=bool)
    if g:
        kg, vg = (T.reshape(T.take(x, every + (slice(0, g),)), (b, h, 1, g, dh)) for x in (k, v))
        s = T.concat([T.matmul(ql, T.swapaxes(kg, -1, -2)), s], axis=-1)
        gmask = np.broadcast_to(kv[:, None, None, :g], (b, m, bl, g))
        mask = np.concatenate([gmask, np.broadcast_to(mask, (b, m, bl, bl))], axis=-1)
    p = T.dropout(T.softmax_rows(T.scale(s, c), mask[:, None]), attn_dropout, rng, training)
    if g:
        out = T.add(T.matmul(T.take(p, (Ellipsis, slice(0, g))), vg),
                    T.matmul(T.take(p, (Ellipsis, slice(g, None))), vl))
    else:
        out = T.matmul(p, vl)
    parts.append(T.reshape(out, (b, h, n - g, dh)))
    return T.concat(parts, axis=2) if g else parts[0]


def attend(H, params, topo=None, key_valid=None, *, scale=True, attn_dropout=0.0,
           rng=None, mode=EVAL, keep_weights=False):
    """Multi-head attention of ``H`` (``[n, d]`` or ``[b, n, d]``) restricted to ``topo``.

    ``topo`` is a :class:`SparseTopology`, a boolean ``n x n`` mask, or
    ``None`` for dense attention. Scores are scaled by ``1/sqrt(d/heads)``
    unless ``scale`` is false.
    """
    training = _check_mode(mode)
    squeeze = H.ndim == 2
    if squeeze:
        H = T.reshape(H, (1,) + H.shape)
    if H.shape[-1] != params.d:
        raise DimensionError(f"hidden size {H.shape[-1]} != projection size {params.d}")
    n = H.shape[1]
    mask = effective_mask(topo, n, key_valid)

    h = params.heads
    q = _split_heads(T.linear(H, params.w_q, params.b_q), h)
    k = _split_heads(T.linear(H, params.w_k, params.b_k), h)
    v = _split_heads(T.linear(H, params.w_v, params.b_v), h)
    c = 1.0 / np.sqrt(params.d // h) if scale else 1.0
    weights = None
    if _blocked(topo) and not keep_weights:
        out = _blocked_attention(q, k, v, topo, key_valid, c, attn_dropout, rng, training)
    else:
        scores = T.matmul(q, T.swapaxes(k, -1, -2))
        if scale:
            scores = T.scale(scores, c)
        probs = T.softmax_rows(scores, mask)
        weights = probs.data.copy() if keep_weights else None
        probs = T.dropout(probs, attn_dropout, rng, training)
        out = T.matmul(probs, v)
    out = _merge_heads(out)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
        weights = weights[0] if weights is not None else None
    return AttentionOutput(out, weights)


@dataclass(eq=False)
class BlockParams:
    """Attention, output projection, two layer norms and a GELU MLP."""

    attn: AttentionParams
    w_o: T.Tensor
    b_o: T.Tensor
    ln1_g: T.Tensor
    ln1_b: T.Tensor
    ln2_g: T.Tensor
    ln2_b: T.Tensor
    w_1: T.Tensor
    b_1: T.Tensor
    w_2: T.Tensor
    b_2: T.Tensor

    @classmethod
    def init(cls, d, heads, mlp_dim, rng, prefix="block"):
        return cls(
            attn=AttentionParams.init(d, heads, rng, f"{prefix}.attn"),
            w_o=_normal(rng, (d, d), 1.0 / np.sqrt(d), f"{prefix}.w_o"),
            b_o=T.parameter(np.zeros(d), f"{prefix}.b_o"),
            ln1_g=T.parameter(np.ones(d), f"{prefix}.ln1_g"),
            ln1_b=T.parameter(np.zeros(d), f"{prefix}.ln1_b"),
            ln2_g=T.parameter(np.ones(d), f"{prefix}.ln2_g"),
            ln2_b=T.parameter(np.zeros(d), f"{prefix}.ln2_b"),
            w_1=_normal(rng, (d, mlp_dim), 1.0 / np.sqrt(d), f"{prefix}.w_1"),
            b_1=T.parameter(np.zeros(mlp_dim), f"{prefix}.b_1"),
            w_2=_normal(rng, (mlp_dim, d), 1.0 / np.sqrt(mlp_dim), f"{prefix}.w_2"),
            b_2=T.parameter(np.zeros(d), f"{prefix}.b_2"),
        )

    def tensors(self):
        out = {f"attn.{k}": v for k, v in self.attn.tensors().items()}
        for f in fields(self):
            if f.name != "attn":
                out[f.name] = getattr(self, f.name)
        return out


def transformer_block(H, block, topo=None, key_valid=None, *, dropout=0.0, attn_dropout=0.0,
                      mode=EVAL, rng=None, scale=True):
    """Pre-norm residual block: ``H + Attn(LN(H))`` then ``+ MLP(LN(.))``."""
    training = _check_mode(mode)
    x = T.layer_norm(H, block.ln1_g, block.ln1_b)
    a = attend(x, block.attn, topo, key_valid, scale=scale, attn_dropout=attn_dropout,
               rng=rng, mode=mode).values
    a = T.linear(a, block.w_o, block.b_o)
    H = T.add(H, T.dropout(a, dropout, rng, training))
    x = T.layer_norm(H, block.ln2_g, block.ln2_b)
    x = T.linear(T.gelu(T.linear(x, block.w_1, block.b_1)), block.w_2, block.b_2)
    return T.add(H, T.dropout(x, dropout, rng, training))
