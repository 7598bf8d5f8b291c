"""Hypergraph view: per-sequence hyperedges over positions and their propagation.

Internally every batch uses a position-indexed column layout: the semantic
and behavior incidence blocks are ``[..., J, J]`` and column ``a`` is the
hyperedge anchored at position ``a`` (the first unmasked occurrence of an
item).  Columns without an anchor are all zero, which leaves the convolution
unchanged.  :class:`IncidenceMatrix` gives the compact ``J x |E|`` form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import PAD
from .errors import DimensionError
from .tensor import Tensor, concat, l2_normalize, lift, sigmoid, take_flat, where

SEMANTIC, BEHAVIOR = "semantic", "behavior"


def semantic_scores(V: Tensor, metric: Tensor) -> Tensor:
    """beta for every pair of rows of ``V`` ([..., J, d]): mean over channels of
    the cosine between channel-weighted rows.  ``metric`` is [channels, d]."""
    *lead, J, d = V.shape
    channels = metric.shape[0]
    weighted = V.reshape(*lead, 1, J, d) * metric.reshape(channels, 1, d)
    unit = l2_normalize(weighted, axis=-1)
    return (unit @ unit.mT).mean(axis=-3)


def semantic_similarity(v_a, v_b, metric) -> float:
    """beta between two vectors; a zero-norm weighted vector scores 0 on that channel."""
    V = Tensor(np.stack([np.asarray(lift(v_a).data), np.asarray(lift(v_b).data)]))
    return float(semantic_scores(V, lift(metric)).data[0, 1])


def anchors(items: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Position of the first valid occurrence of each valid position's item (-1 elsewhere)."""
    items = np.asarray(items)
    valid = np.asarray(valid, dtype=bool)
    J = items.shape[-1]
    same = (items[..., :, None] == items[..., None, :]) & valid[..., :, None] & valid[..., None, :]
    first = np.where(same.any(axis=-1), same.argmax(axis=-1), -1)
    return np.where(valid, first, -1)


@dataclass
class Structure:
    """Non-differentiable hypergraph layout for a batch (all arrays share leading dims)."""

    valid: np.ndarray      # [..., J] real, unmasked positions
    anchor: np.ndarray     # [..., J] anchor position of own item, -1 if not valid
    own: np.ndarray        # [..., J, J] 1 at (i, anchor[i])
    semantic: np.ndarray   # [..., J, J] bool, top-k picks other than the own item
    behavior: np.ndarray   # [..., J, J] multi-occurrence item hyperedges, anchor columns
    same_item: np.ndarray  # [..., J, J] valid pairs holding the same item

    def anchor_mask(self) -> np.ndarray:
        J = self.anchor.shape[-1]
        return np.arange(J) == self.anchor

    def behavior_columns(self) -> np.ndarray:
        return self.behavior.any(axis=-2)

    @cached_property
    def anchor_index(self) -> np.ndarray:
        """[..., J, J] column anchor[j] for every (i, j), 0 where j is not valid."""
        anchor = np.where(self.anchor >= 0, self.anchor, 0)
        return np.ascontiguousarray(np.broadcast_to(anchor[..., None, :], self.own.shape))

    @cached_property
    def anchor_flat(self) -> np.ndarray:
        """Flat positions of (i, anchor[j]) in a [..., J, J] array."""
        J = self.anchor.shape[-1]
        rows = np.arange(int(np.prod(self.own.shape[:-1]))).reshape(self.own.shape[:-1] + (1,))
        return rows * J + self.anchor_index

    @cached_property
    def semantic_pairs(self) -> np.ndarray:
        """1.0 where position i picked the hyperedge of j's item (own item excluded)."""
        picked = np.take_along_axis(self.semantic, self.anchor_index, axis=-1)
        return (picked & self.valid[..., None, :]).astype(np.float64)


def build_structure(items: np.ndarray, valid: np.ndarray, beta: np.ndarray | None, k: int) -> Structure:
    """Top-k semantic picks and multi-occurrence groups for each sequence.

    Each valid position always connects to its own item's hyperedge (weight 1);
    the remaining ``k - 1`` slots go to the anchors with the highest beta,
    ties broken by lower position.
    """
    items = np.asarray(items)
    valid = np.asarray(valid, dtype=bool)
    J = items.shape[-1]
    anchor = anchors(items, valid)
    is_anchor = np.arange(J) == anchor
    own = (np.arange(J) == anchor[..., :, None]) & valid[..., :, None]
    same = (items[..., :, None] == items[..., None, :]) & valid[..., :, None] & valid[..., None, :]

    if beta is None:
        semantic = np.zeros(own.shape, dtype=bool)
    else:
        score = np.where(is_anchor[..., None, :] & valid[..., :, None], beta, -np.inf)
        score = np.where(own, np.inf, score)
        order = np.argsort(-score, axis=-1, kind="stable")[..., :k]
        picked = np.zeros(own.shape, dtype=bool)
        np.put_along_axis(picked, order, True, axis=-1)
        semantic = picked & np.isfinite(score) & ~own

    counts = same.sum(axis=-1)
    behavior = own & (counts >= 2)[..., :, None]
    return Structure(valid, anchor, own.astype(np.float64), semantic, behavior.astype(np.float64), same)


def incidence_blocks(structure: Structure, beta: Tensor | None, semantic: bool = True, behavior: bool = True) -> Tensor:
    """Differentiable incidence M = M^p || M^q in anchor-column layout."""
    blocks = []
    if semantic:
        own = structure.own.astype(beta.data.dtype if beta is not None else np.float64)
        Mp = lift(own) if beta is None else beta * structure.semantic.astype(own.dtype) + own
        blocks.append(Mp)
    if behavior:
        blocks.append(Tensor(structure.behavior))
    if not blocks:
        raise ValueError("at least one hyperedge family is required")
    return blocks[0] if len(blocks) == 1 else concat(blocks, axis=-1)


@dataclass
class IncidenceMatrix:
    """Compact J x |E| incidence with one provenance tag per column."""

    values: np.ndarray
    kinds: list[str]
    anchors: list[int]  # anchor position of each hyperedge
    items: list[int]    # item token of each hyperedge

    @property
    def n_semantic(self) -> int:
        return self.kinds.count(SEMANTIC)

    def concat(self, other: IncidenceMatrix) -> IncidenceMatrix:
        return IncidenceMatrix(
            np.concatenate([self.values, other.values], axis=1),
            self.kinds + other.kinds,
            self.anchors + other.anchors,
            self.items + other.items,
        )


def _compact(values: np.ndarray, columns: np.ndarray, kind: str, items: np.ndarray) -> IncidenceMatrix:
    cols = np.flatnonzero(columns)
    return IncidenceMatrix(values[:, cols].copy(), [kind] * cols.size, cols.tolist(), [int(items[c]) for c in cols])


def build_semantic_incidence(items: np.ndarray, valid: np.ndarray, beta: np.ndarray, k: int) -> IncidenceMatrix:
    """M^p for one sequence: one column per unique unmasked item."""
    items = np.asarray(items)
    beta = np.asarray(beta)
    s = build_structure(items, valid, beta, k)
    values = beta * s.semantic + s.own
    return _compact(values, s.anchor_mask(), SEMANTIC, items)


def build_behavior_incidence(items: np.ndarray, valid: np.ndarray) -> IncidenceMatrix:
    """M^q for one sequence: one 0/1 column per item seen at two or more unmasked positions."""
    items = np.asarray(items)
    s = build_structure(items, valid, None, 1)
    return _compact(s.behavior, s.behavior_columns(), BEHAVIOR, items)


def compact_incidence(structure: Structure, M: np.ndarray, items: np.ndarray, semantic=True, behavior=True) -> IncidenceMatrix:
    """Compact form of one sequence's padded incidence (``M`` as from :func:`incidence_blocks`)."""
    J = items.shape[-1]
    parts = []
    offset = 0
    if semantic:
        parts.append(_compact(M[:, :J], structure.anchor_mask(), SEMANTIC, items))
        offset = J
    if behavior:
        parts.append(_compact(M[:, offset : offset + J], structure.behavior_columns(), BEHAVIOR, items))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out


def self_gate_init(V: Tensor, gate_w: Tensor, gate_r: Tensor, valid) -> Tensor:
    """x0 = v * sigmoid(v . w + r), zero at masked and PAD positions."""
    real = np.asarray(valid, dtype=V.data.dtype)[..., None]
    gate = sigmoid(V @ gate_w.reshape(-1, 1) + gate_r)
    return V * gate * real


def _safe_reciprocal(x: Tensor) -> Tensor:
    ok = x.data > 0
    return where(ok, 1.0 / where(ok, x, 1.0), 0.0)


@dataclass
class Propagator:
    """A row-normalised J x J operator; rows with zero degree pass their input through."""

    matrix: Tensor
    has_degree: np.ndarray

    def __call__(self, X: Tensor) -> Tensor:
        if X.shape[-2] != self.matrix.shape[-1]:
            raise DimensionError(f"operator {self.matrix.shape} cannot act on {X.shape}")
        return where(self.has_degree[..., None], self.matrix @ X, X)


def full_operator(M: Tensor) -> Propagator:
    """D_v^-1 M D_e^-1 M^T with degrees from |M|."""
    A = M.abs()
    dv = A.sum(axis=-1)
    de = A.sum(axis=-2)
    left = M * _safe_reciprocal(dv).reshape(*dv.shape, 1)
    right = M * _safe_reciprocal(de).reshape(*de.shape[:-1], 1, de.shape[-1])
    return Propagator(left @ right.mT, dv.data > 0)


def hyperconv_full(X: Tensor, M: Tensor) -> Tensor:
    """One layer of two-stage (node -> hyperedge -> node) propagation."""
    return full_operator(lift(M))(lift(X))


def truncated_beta(structure: Structure, beta: Tensor | None) -> Tensor:
    """Position-level beta kept by the top-k truncation: entry (i, j) is the
    incidence of position i toward j's item hyperedge (1 for the same item)."""
    same = structure.same_item.astype(np.float64)
    if beta is None:
        return lift(same)
    return take_flat(beta, structure.anchor_flat) * structure.semantic_pairs + same


def simplified_matrix(structure: Structure, beta: Tensor | None, w0: float, semantic=True, behavior=True) -> Tensor:
    """M' = C + A + W: same-item indicator, truncated first-order beta, constant w0.

    On same-item pairs the truncated beta is the own-item weight 1, so A
    contributes 1 there; elsewhere A = b_ij + b_ji with b the truncated beta.
    """
    valid = structure.valid.astype(np.float64)
    pair = valid[..., :, None] * valid[..., None, :]
    same = structure.same_item.astype(np.float64)
    base = np.zeros_like(pair)
    if behavior:
        base += same
    if semantic:
        base += same + w0 * pair
    out = lift(base)
    if semantic and beta is not None:
        T = take_flat(beta, structure.anchor_flat) * structure.semantic_pairs
        out = out + T + T.mT
    return out


def simplified_operator(Mprime: Tensor) -> Propagator:
    """D^-1 M' with D from absolute row sums."""
    deg = Mprime.abs().sum(axis=-1)
    return Propagator(Mprime * _safe_reciprocal(deg).reshape(*deg.shape, 1), deg.data > 0)


def hyperconv_simplified(X: Tensor, Mprime: Tensor) -> Tensor:
    return simplified_operator(lift(Mprime))(lift(X))


def build_simplified_operator(items, valid, beta_truncated: np.ndarray, w0: float) -> np.ndarray:
    """M' for one sequence from an already top-k-truncated position-level beta."""
    items = np.asarray(items)
    valid = np.asarray(valid, dtype=bool)
    pair = valid[:, None] & valid[None, :]
    same = (items[:, None] == items[None, :]) & pair
    bt = np.asarray(beta_truncated, dtype=np.float64)
    A = np.where(same, bt, bt + bt.T)
    return (same + A + w0) * pair


def layer_average(layers: list[Tensor]) -> Tensor:
    """Mean over propagation layers 0..L (input layer included)."""
    total = layers[0]
    for x in layers[1:]:
        total = total + x
    return total * (1.0 / len(layers))


def pool_matrix(valid: np.ndarray, masked: np.ndarray, q1: int, q2: int) -> tuple[np.ndarray, np.ndarray]:
    """Row m of the result averages valid positions in [m - q1, m + q2] for masked m;
    other rows are identity rows.  Second output flags masked rows with an empty window."""
    valid = np.asarray(valid, dtype=bool)
    masked = np.asarray(masked, dtype=bool)
    J = valid.shape[-1]
    offset = np.arange(J)[None, :] - np.arange(J)[:, None]  # column minus row
    window = (offset >= -q1) & (offset <= q2)
    members = window & valid[..., None, :]
    counts = members.sum(axis=-1, keepdims=True)
    pooled = np.where(counts > 0, members / np.maximum(counts, 1), 0.0)
    eye = np.broadcast_to(np.eye(J), pooled.shape)
    P = np.where(masked[..., :, None], pooled, eye)
    empty = masked & (counts[..., 0] == 0)
    return P, empty


def masked_position_pool(x: Tensor, m: int, q1: int, q2: int, valid) -> tuple[Tensor, bool]:
    """Windowed mean of valid rows around position ``m`` (zero vector and True when empty)."""
    valid = np.asarray(valid, dtype=bool)
    J = valid.shape[-1]
    lo, hi = max(0, m - q1), min(J - 1, m + q2)
    rows = [j for j in range(lo, hi + 1) if valid[j]]
    if not rows:
        return lift(x)[m] * 0.0, True
    return lift(x)[np.array(rows)].mean(axis=0), False


def hypergraph_inputs(items: np.ndarray, behaviors: np.ndarray, params, mask_item: int) -> tuple[Tensor, np.ndarray]:
    """v_j = e_j + b_j at unmasked real positions, zero elsewhere."""
    items = np.asarray(items)
    valid = (items != PAD) & (items != mask_item)
    real = valid[..., None].astype(params["item_emb"].data.dtype)
    V = (params["item_emb"][items] + params["beh_emb"][np.asarray(behaviors)]) * real
    return V, valid
