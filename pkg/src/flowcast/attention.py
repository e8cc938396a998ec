"""Global awareness layers: positional encoding, multi-head temporal/spatial
attention, fusion attention, and the three transformer-like blocks that read
the full hidden-state sequence at once.

All attention operates on [B, N, T, d] hidden sequences. Temporal attention
attends over the T axis per node; spatial attention transposes N and T and
attends over nodes per step; fusion attention is temporal attention whose
value stream is the output of an inner spatial attention. The three blocks
combine temporal and spatial attention in parallel, in series, or fused, each
with residual connections and layer normalization.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

LN_EPS = 1e-5

# test instrumentation: callables receiving every softmaxed attention matrix
_WEIGHT_OBSERVERS: list = []


@contextmanager
def capture_attention_weights():
    """Collect the row-stochastic attention weight arrays computed inside the
    block, for inspection in tests."""
    captured: list[np.ndarray] = []
    _WEIGHT_OBSERVERS.append(captured.append)
    try:
        yield captured
    finally:
        _WEIGHT_OBSERVERS.remove(captured.append)


def positional_encoding(steps: int, dim: int) -> Tensor:
    """Sinusoidal position table [steps, dim]:
    PE[t, 2c] = sin(t / 1000^(2c/dim)), PE[t, 2c+1] = cos(same angle)."""
    if dim < 1:
        raise ConfigError(f"positional encoding dim must be >= 1, got {dim}")
    pe = np.zeros((steps, dim))
    t = np.arange(steps, dtype=np.float64)[:, None]
    even = np.arange(0, dim, 2, dtype=np.float64)
    angles = t / np.power(1000.0, even / dim)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)[:, : pe[:, 1::2].shape[1]]
    return Tensor(pe)


@dataclass
class AttentionParams:
    """Per-head projections stacked as [heads, d, d/heads] plus the output
    projection [d, d]."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @staticmethod
    def create(dim: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"hidden dim {dim} is not divisible by {heads} heads")
        d_k = dim // heads
        bound = np.sqrt(1.0 / dim)
        mk = lambda shape: Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        return AttentionParams(
            w_q=mk((heads, dim, d_k)),
            w_k=mk((heads, dim, d_k)),
            w_v=mk((heads, dim, d_k)),
            w_o=mk((dim, dim)),
            heads=heads,
        )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         weight_dropout: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the second-to-last axis.

    q, k are [..., L, d_k] and v is [..., L, d_v]; the weight rows are
    row-stochastic and the output lies in the convex hull of the v rows.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q/k depth mismatch {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: k/v length mismatch {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = ad.scalar_affine(ad.matmul(q, _swap_last(k)), 1.0 / np.sqrt(d_k), 0.0)
    weights = ad.softmax(scores, axis=-1)
    for observe in _WEIGHT_OBSERVERS:
        observe(weights.data)
    if weight_dropout > 0.0 and training:
        weights = ad.dropout(weights, weight_dropout, training, rng)
    return ad.matmul(weights, v)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(x, tuple(axes))


def _merge_heads(per_head: Tensor, w_o: Tensor) -> Tensor:
    # [B, G, h, L, d_k] -> [B, G, L, h*d_k] -> output projection
    b, g, h, l, d_k = per_head.shape
    merged = ad.reshape(ad.transpose(per_head, (0, 1, 3, 2, 4)), (b, g, l, h * d_k))
    return ad.matmul(merged, w_o)


def _multi_head(x: Tensor, p: AttentionParams, weight_dropout: float,
                training: bool, rng) -> Tensor:
    """Multi-head attention over the third axis of x [B, G, L, d]; each of the
    B*G groups attends independently over its L positions."""
    q = ad.einsum("bgld,hde->bghle", x, p.w_q)
    k = ad.einsum("bgld,hde->bghle", x, p.w_k)
    v = ad.einsum("bgld,hde->bghle", x, p.w_v)
    heads = scaled_dot_attention(q, k, v, weight_dropout, training, rng)
    return _merge_heads(heads, p.w_o)


def temporal_attention(x: Tensor, p: AttentionParams, weight_dropout: float = 0.0,
                       training: bool = False, rng=None) -> Tensor:
    """Attend over time steps independently per (batch, node). [B,N,T,d] in
    and out."""
    return _multi_head(x, p, weight_dropout, training, rng)


def spatial_attention(x: Tensor, p: AttentionParams, weight_dropout: float = 0.0,
                      training: bool = False, rng=None) -> Tensor:
    """Attend over nodes independently per (batch, step): transpose N and T,
    run the same multi-head attention, transpose back."""
    flipped = ad.transpose(x, (0, 2, 1, 3))
    out = _multi_head(flipped, p, weight_dropout, training, rng)
    return ad.transpose(out, (0, 2, 1, 3))


def stfa(x: Tensor, fusion: AttentionParams, spatial: AttentionParams,
         weight_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Fusion attention: temporal attention whose value stream is the output
    of a spatial attention over the same input."""
    s = spatial_attention(x, spatial, weight_dropout, training, rng)
    q = ad.einsum("bgld,hde->bghle", x, fusion.w_q)
    k = ad.einsum("bgld,hde->bghle", x, fusion.w_k)
    v = ad.einsum("bgld,hde->bghle", s, fusion.w_v)
    heads = scaled_dot_attention(q, k, v, weight_dropout, training, rng)
    return _merge_heads(heads, fusion.w_o)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @staticmethod
    def create(dim: int) -> "LayerNormParams":
        return LayerNormParams(Tensor(np.ones(dim), requires_grad=True),
                               Tensor(np.zeros(dim), requires_grad=True))


# layer-norm sites per block variant, in application order
_NORM_SITES = {
    "parallel": ("merge", "ffn"),
    "serial": ("temporal", "spatial", "ffn"),
    "fused": ("fusion", "ffn"),
    "ta_only": ("temporal",),
    "sa_only": ("spatial",),
}


@dataclass
class Gst2Params:
    """Parameters of one global awareness block; only the fields the variant
    needs are allocated."""

    variant: str
    temporal: AttentionParams | None = None
    spatial: AttentionParams | None = None
    fusion: AttentionParams | None = None
    concat_proj: Tensor | None = None          # [2d, d], parallel only
    ffn_w1: Tensor | None = None
    ffn_b1: Tensor | None = None
    ffn_w2: Tensor | None = None
    ffn_b2: Tensor | None = None
    norms: dict = field(default_factory=dict)  # site name -> LayerNormParams

    @staticmethod
    def create(variant: str, dim: int, heads: int, ffn_dim: int,
               rng: np.random.Generator) -> "Gst2Params":
        if variant not in _NORM_SITES:
            raise ConfigError(f"unknown global layer variant '{variant}'")
        p = Gst2Params(variant)
        if variant in ("parallel", "serial", "ta_only"):
            p.temporal = AttentionParams.create(dim, heads, rng)
        if variant in ("parallel", "serial", "fused", "sa_only"):
            p.spatial = AttentionParams.create(dim, heads, rng)
        if variant == "fused":
            p.fusion = AttentionParams.create(dim, heads, rng)
        if variant == "parallel":
            bound = np.sqrt(1.0 / (2 * dim))
            p.concat_proj = Tensor(rng.uniform(-bound, bound, (2 * dim, dim)), requires_grad=True)
        if variant in ("parallel", "serial", "fused"):
            w_bound = np.sqrt(1.0 / dim)
            p.ffn_w1 = Tensor(rng.uniform(-w_bound, w_bound, (dim, ffn_dim)), requires_grad=True)
            p.ffn_b1 = Tensor(np.zeros(ffn_dim), requires_grad=True)
            v_bound = np.sqrt(1.0 / ffn_dim)
            p.ffn_w2 = Tensor(rng.uniform(-v_bound, v_bound, (ffn_dim, dim)), requires_grad=True)
            p.ffn_b2 = Tensor(np.zeros(dim), requires_grad=True)
        p.norms = {site: LayerNormParams.create(dim) for site in _NORM_SITES[variant]}
        return p


def _ln(x: Tensor, p: Gst2Params, site: str) -> Tensor:
    norm = p.norms[site]
    return ad.layer_norm(x, norm.gamma, norm.beta, LN_EPS)


def _ffn(x: Tensor, p: Gst2Params, inner_dropout: float, training: bool, rng) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, p.ffn_w1), p.ffn_b1))
    hidden = ad.dropout(hidden, inner_dropout, training, rng)
    return ad.add(ad.matmul(hidden, p.ffn_w2), p.ffn_b2)


def _embed_positions(h: Tensor, input_dropout: float, training: bool, rng) -> Tensor:
    pe = positional_encoding(h.shape[2], h.shape[3])
    h_e = ad.add(h, ad.reshape(pe, (1, 1) + pe.shape))
    return ad.dropout(h_e, input_dropout, training, rng)


def _check_variant(p: Gst2Params, expected: str):
    if p.variant != expected:
        raise ConfigError(f"layer built for variant '{p.variant}', called as '{expected}'")


def pgst2_layer(h: Tensor, p: Gst2Params, input_dropout: float = 0.0,
                inner_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Parallel block: temporal and spatial attention on the same input,
    concatenated and projected back to d before the residual."""
    _check_variant(p, "parallel")
    h_e = _embed_positions(h, input_dropout, training, rng)
    ta = temporal_attention(h_e, p.temporal, inner_dropout, training, rng)
    sa = spatial_attention(h_e, p.spatial, inner_dropout, training, rng)
    h_c = ad.matmul(ad.concat([ta, sa], axis=-1), p.concat_proj)
    h_p = _ln(ad.add(h_c, h_e), p, "merge")
    return _ln(ad.add(_ffn(h_p, p, inner_dropout, training, rng), h_p), p, "ffn")


def sgst2_layer(h: Tensor, p: Gst2Params, input_dropout: float = 0.0,
                inner_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Serial block: temporal attention, then spatial attention, each with its
    own residual and normalization."""
    _check_variant(p, "serial")
    h_e = _embed_positions(h, input_dropout, training, rng)
    h_t = _ln(ad.add(temporal_attention(h_e, p.temporal, inner_dropout, training, rng), h_e),
              p, "temporal")
    h_s = _ln(ad.add(spatial_attention(h_t, p.spatial, inner_dropout, training, rng), h_t),
              p, "spatial")
    return _ln(ad.add(_ffn(h_s, p, inner_dropout, training, rng), h_s), p, "ffn")


def fgst2_layer(h: Tensor, p: Gst2Params, input_dropout: float = 0.0,
                inner_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Fused block: one fusion attention captures both axes at once."""
    _check_variant(p, "fused")
    h_e = _embed_positions(h, input_dropout, training, rng)
    h_f = _ln(ad.add(stfa(h_e, p.fusion, p.spatial, inner_dropout, training, rng), h_e),
              p, "fusion")
    return _ln(ad.add(_ffn(h_f, p, inner_dropout, training, rng), h_f), p, "ffn")


def ta_only_layer(h: Tensor, p: Gst2Params, input_dropout: float = 0.0,
                  inner_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Ablation block: temporal attention with residual + norm, no feed-forward."""
    _check_variant(p, "ta_only")
    h_e = _embed_positions(h, input_dropout, training, rng)
    return _ln(ad.add(temporal_attention(h_e, p.temporal, inner_dropout, training, rng), h_e),
               p, "temporal")


def sa_only_layer(h: Tensor, p: Gst2Params, input_dropout: float = 0.0,
                  inner_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Ablation block: spatial attention with residual + norm, no feed-forward."""
    _check_variant(p, "sa_only")
    h_e = _embed_positions(h, input_dropout, training, rng)
    return _ln(ad.add(spatial_attention(h_e, p.spatial, inner_dropout, training, rng), h_e),
               p, "spatial")


_LAYER_FNS = {
    "parallel": pgst2_layer,
    "serial": sgst2_layer,
    "fused": fgst2_layer,
    "ta_only": ta_only_layer,
    "sa_only": sa_only_layer,
}


def apply_global_layer(h: Tensor, p: Gst2Params | None, variant: str,
                       input_dropout: float = 0.0, inner_dropout: float = 0.0,
                       training: bool = False, rng=None) -> Tensor:
    """Dispatch on the configured variant; 'none' passes h through unchanged."""
    if variant == "none":
        return h
    if variant not in _LAYER_FNS:
        raise ConfigError(f"unknown global layer variant '{variant}'")
    return _LAYER_FNS[variant](h, p, input_dropout, inner_dropout, training, rng)
