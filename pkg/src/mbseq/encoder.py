"""Multi-scale Transformer view over behavior-aware item sequences.

All functions accept an optional leading batch axis: ``H`` is ``[..., J, d]``.
Head-specific projections are stored as one ``d x d`` matrix whose column
blocks of width ``d / heads`` belong to successive heads.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .data import PAD
from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat, dropout, gelu, layer_norm, softmax

_NEG = -1e30


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., T, d] -> [..., heads, T, d / heads]"""
    *lead, t, d = x.shape
    if d % heads:
        raise ConfigError(f"d={d} not divisible by heads={heads}")
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, T, dh] -> [..., T, heads * dh]"""
    *lead, heads, t, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, heads * dh)


def embed_sequence(items: np.ndarray, behaviors: np.ndarray, tables: Mapping[str, Tensor], attention_mask=None) -> Tensor:
    """h_j = item row + position row + behavior row.

    Positions outside ``attention_mask`` are looked up as PAD whatever id they
    carry; PAD rows contribute zero (and receive zero gradient).
    """
    items = np.asarray(items)
    behaviors = np.asarray(behaviors)
    if attention_mask is not None:
        keep = np.asarray(attention_mask, dtype=bool)
        items = np.where(keep, items, PAD)
        behaviors = np.where(keep, behaviors, PAD)
    item_table, beh_table, pos_table = tables["item_emb"], tables["beh_emb"], tables["pos_emb"]
    if items.max(initial=0) >= item_table.shape[0] or behaviors.max(initial=0) >= beh_table.shape[0]:
        raise IndexError("token id outside embedding table")
    if items.shape[-1] != pos_table.shape[0]:
        raise DimensionError(f"sequence length {items.shape[-1]} != position table rows {pos_table.shape[0]}")
    real = (items != PAD)[..., None].astype(item_table.data.dtype)
    return (item_table[items] + beh_table[behaviors]) * real + pos_table


def _attend(q: Tensor, k: Tensor, v: Tensor, key_bias=None, p_drop=0.0, rng=None, trace=None, tag=None) -> Tensor:
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    scores = (q @ k.mT) * (1.0 / math.sqrt(q.shape[-1]))
    if key_bias is not None:
        scores = scores + key_bias
    weights = softmax(scores, axis=-1)
    if trace is not None and tag is not None:
        trace[tag] = weights.data.copy()
    return dropout(weights, p_drop, rng) @ v


def lowrank_attention(
    H: Tensor, E: Tensor, F: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
    heads: int = 1, pad_mask=None, p_drop: float = 0.0, rng=None, trace=None, tag="lowrank",
) -> Tensor:
    """softmax(H Wq (E H Wk)^T / sqrt(dk)) F H Wv, with keys/values compressed to J/C rows.

    ``pad_mask`` (True at real positions) zeroes PAD rows of H before the E/F
    projections.  Output rows stay aligned with the J query positions.
    """
    J = H.shape[-2]
    if E.shape[-1] != J or F.shape[-1] != J or E.shape != F.shape:
        raise DimensionError(f"E{E.shape} / F{F.shape} must both be (J/C) x {J}")
    Hkv = H if pad_mask is None else H * np.asarray(pad_mask, dtype=H.data.dtype)[..., None]
    q = split_heads(H @ wq, heads)
    k = split_heads((E @ Hkv) @ wk, heads)
    v = split_heads((F @ Hkv) @ wv, heads)
    return merge_heads(_attend(q, k, v, None, p_drop, rng, trace, tag))


def granularity_aggregate(H: Tensor, p: int) -> Tensor:
    """Mean of each consecutive block of ``p`` rows: [..., J, d] -> [..., J/p, d]."""
    *lead, J, d = H.shape
    if J % p:
        raise ConfigError(f"J={J} not divisible by p={p}")
    return H.reshape(*lead, J // p, p, d).mean(axis=-2)


def scale_attention(
    G: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
    heads: int = 1, key_mask=None, p_drop: float = 0.0, rng=None, trace=None, tag="scale",
) -> Tensor:
    """Full scaled dot-product self-attention over the rows of ``G``.

    ``key_mask`` (True at usable rows) excludes rows from being attended to.
    """
    bias = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km, 0.0, _NEG)[..., None, None, :]
    q, k, v = (split_heads(G @ w, heads) for w in (wq, wk, wv))
    return merge_heads(_attend(q, k, v, bias, p_drop, rng, trace, tag))


def fuse_scales(H_hat: Tensor, H_p1: Tensor, H_p2: Tensor, W_fuse: Tensor) -> Tensor:
    """Stack the three scales along the sequence axis and map back to J rows."""
    rows = H_hat.shape[-2] + H_p1.shape[-2] + H_p2.shape[-2]
    if W_fuse.shape != (H_hat.shape[-2], rows):
        raise DimensionError(f"fusion matrix {W_fuse.shape} does not map {rows} rows to {H_hat.shape[-2]}")
    return W_fuse @ concat([H_hat, H_p1, H_p2], axis=-2)


def window_mask(pad_mask: np.ndarray, p: int) -> np.ndarray:
    """True for pooled rows whose window holds at least one real position."""
    pm = np.asarray(pad_mask, dtype=bool)
    return pm.reshape(*pm.shape[:-1], pm.shape[-1] // p, p).any(axis=-1)


def multihead_encode(
    H: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int, p1: int, p2: int,
    pad_mask=None, p_drop: float = 0.0, rng=None, trace=None, multiscale: bool = True,
) -> Tensor:
    """One attention sublayer: low-rank + two pooled scales, fused, then W^D.

    With ``multiscale=False`` this is plain multi-head self-attention over the
    J positions (PAD keys excluded), used by the ablation variant.
    """
    P = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    tag = lambda name: f"{prefix}.{name}"  # noqa: E731
    if pad_mask is None:
        pad_mask = np.ones(H.shape[:-1], dtype=bool)
    real = np.asarray(pad_mask, dtype=H.data.dtype)[..., None]
    if not multiscale:
        out = scale_attention(H, P("wq"), P("wk"), P("wv"), heads, pad_mask, p_drop, rng, trace, tag("dense"))
        return out @ P("wd")

    Hz = H * real
    H_hat = lowrank_attention(H, P("E"), P("F"), P("wq"), P("wk"), P("wv"), heads, pad_mask, p_drop, rng, trace, tag("lowrank"))
    H_hat = H_hat * real
    scales = []
    for name, p in (("s1", p1), ("s2", p2)):
        G = granularity_aggregate(Hz, p)
        scales.append(
            scale_attention(
                G, P(f"{name}.wq"), P(f"{name}.wk"), P(f"{name}.wv"), heads,
                window_mask(pad_mask, p), p_drop, rng, trace, tag(f"scale{p}"),
            )
        )
    return fuse_scales(H_hat, scales[0], scales[1], P("fuse")) @ P("wd")


def pffn(H: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise GELU(x W1 + b1) W2 + b2."""
    return gelu(H @ w1 + b1) @ w2 + b2


def encoder_layer(
    H: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int, p1: int, p2: int,
    pad_mask=None, p_drop: float = 0.0, rng=None, trace=None, multiscale: bool = True,
) -> Tensor:
    P = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    attn = multihead_encode(H, params, prefix, heads, p1, p2, pad_mask, p_drop, rng, trace, multiscale)
    X = layer_norm(H + dropout(attn, p_drop, rng), P("ln1.g"), P("ln1.b"))
    ff = pffn(X, P("ffn.w1"), P("ffn.b1"), P("ffn.w2"), P("ffn.b2"))
    return layer_norm(X + dropout(ff, p_drop, rng), P("ln2.g"), P("ln2.b"))


def encode(
    items: np.ndarray, behaviors: np.ndarray, params: Mapping[str, Tensor], layers: int,
    heads: int, p1: int, p2: int, p_drop: float = 0.0, rng=None, trace=None, multiscale: bool = True,
    attention_mask=None,
) -> Tensor:
    """Embeddings followed by ``layers`` encoder layers; returns [..., J, d].

    ``attention_mask`` (True at real positions) defaults to ``items != PAD``.
    """
    pad_mask = np.asarray(items) != PAD if attention_mask is None else np.asarray(attention_mask, dtype=bool)
    H = embed_sequence(items, behaviors, params, pad_mask)
    for layer in range(layers):
        H = encoder_layer(H, params, f"enc.{layer}", heads, p1, p2, pad_mask, p_drop, rng, trace, multiscale)
    return H
