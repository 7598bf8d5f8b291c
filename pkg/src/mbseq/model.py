"""Cross-view fusion of the sequential and hypergraph views, scoring, and the Cloze loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder, hypergraph
from .config import RunConfig
from .data import PAD, Batch
from .errors import ContractError
from .tensor import Tensor, concat, cross_entropy, lift, parameter, softmax


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: RunConfig, n_items: int, n_behaviors: int, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, J = cfg.d, cfg.J
    tn = lambda *shape: truncated_normal(rng, shape)  # noqa: E731
    raw: dict[str, np.ndarray] = {
        "item_emb": tn(n_items + 2, d),
        "beh_emb": tn(n_behaviors + 2, d),
        "pos_emb": tn(J, d),
    }
    raw["item_emb"][PAD] = 0.0
    raw["beh_emb"][PAD] = 0.0
    for layer in range(cfg.L):
        p = f"enc.{layer}"
        for name in ("wq", "wk", "wv", "wd"):
            raw[f"{p}.{name}"] = tn(d, d)
        if not cfg.no_ms_attention:
            r = J // cfg.C
            # sequence-axis maps: unit-variance rows keep compressed keys at input scale
            raw[f"{p}.E"] = truncated_normal(rng, (r, J), 1.0 / np.sqrt(J))
            raw[f"{p}.F"] = truncated_normal(rng, (r, J), 1.0 / np.sqrt(J))
            for s in ("s1", "s2"):
                for name in ("wq", "wk", "wv"):
                    raw[f"{p}.{s}.{name}"] = tn(d, d)
            rows = J + J // cfg.p1 + J // cfg.p2
            fuse = tn(J, rows)
            fuse[:, :J] += np.eye(J)
            raw[f"{p}.fuse"] = fuse
        raw[f"{p}.ln1.g"] = np.ones(d)
        raw[f"{p}.ln1.b"] = np.zeros(d)
        raw[f"{p}.ln2.g"] = np.ones(d)
        raw[f"{p}.ln2.b"] = np.zeros(d)
        raw[f"{p}.ffn.w1"] = tn(d, cfg.ffn_width)
        raw[f"{p}.ffn.b1"] = np.zeros(cfg.ffn_width)
        raw[f"{p}.ffn.w2"] = tn(cfg.ffn_width, d)
        raw[f"{p}.ffn.b2"] = np.zeros(d)
    if not cfg.no_hypergraph:
        raw["hg.gate_w"] = tn(d)
        raw["hg.gate_r"] = np.zeros(1)
        if not cfg.no_ml_hyper:
            # channel weights start near 1 so beta begins as plain cosine
            raw["hg.metric"] = 1.0 + tn(cfg.metric_channels, d)
        raw["fusion.a"] = tn(d)
        raw["fusion.wa"] = tn(d, d)
    return {name: parameter(value, name) for name, value in raw.items()}


def cross_view_attention(h: Tensor, x: Tensor, a: Tensor, wa: Tensor) -> tuple[Tensor, Tensor]:
    """g = alpha1 * h + alpha2 * x with alpha = softmax over the two views of a^T W_a e.

    Works row-wise on [..., d] inputs; returns (g, alphas[..., 2]).
    """
    h, x = lift(h), lift(x)
    proj = lift(wa).mT @ lift(a)  # W_a^T a, so e . proj == a^T W_a e
    scores = concat([(h @ proj).reshape(*h.shape[:-1], 1), (x @ proj).reshape(*x.shape[:-1], 1)], axis=-1)
    alpha = softmax(scores, axis=-1)
    g = h * alpha[..., 0:1] + x * alpha[..., 1:2]
    return g, alpha


def score_items(g: Tensor, item_table: Tensor) -> Tensor:
    """Dot product with every catalog item row (PAD and MASK rows excluded)."""
    return lift(g) @ item_table[1:-1].mT


def cloze_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log softmax probability of the true item; ``labels`` index logits columns."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("no masked positions in batch")
    return cross_entropy(logits, labels)


@dataclass
class Forward:
    h: Tensor                  # sequential view, [B, J, d]
    x: Tensor | None           # hypergraph view after masked pooling, [B, J, d]
    g: Tensor                  # fused representation, [B, J, d]
    alpha: Tensor | None       # [B, J, 2]
    structure: hypergraph.Structure | None = None
    empty_windows: np.ndarray | None = None


class Recommender:
    """Parameters plus the forward pass over a batch of behavior sequences."""

    def __init__(self, cfg: RunConfig, n_items: int, n_behaviors: int, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.n_items = n_items
        self.n_behaviors = n_behaviors
        self.params = params if params is not None else init_params(cfg, n_items, n_behaviors)

    @property
    def mask_item(self) -> int:
        return self.n_items + 1

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(entries))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing}")
        for name, p in self.params.items():
            if entries[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {entries[name].shape} != {p.shape}")
            p.data = np.array(entries[name], dtype=p.data.dtype)

    def hypergraph_view(self, batch: Batch, trace=None) -> tuple[Tensor, hypergraph.Structure, np.ndarray]:
        cfg, P = self.cfg, self.params
        V, valid = hypergraph.hypergraph_inputs(batch.items, batch.behaviors, P, self.mask_item)
        use_sem, use_beh = not cfg.no_ml_hyper, not cfg.no_mb_hyper
        beta = hypergraph.semantic_scores(V, P["hg.metric"]) if use_sem else None
        structure = hypergraph.build_structure(batch.items, valid, None if beta is None else beta.data, cfg.k)
        if cfg.conv_mode == "full":
            M = hypergraph.incidence_blocks(structure, beta, semantic=use_sem, behavior=use_beh)
            op = hypergraph.full_operator(M)
        else:
            M = hypergraph.simplified_matrix(structure, beta, cfg.w0, semantic=use_sem, behavior=use_beh)
            op = hypergraph.simplified_operator(M)
        if trace is not None:
            trace["hg.operator_input"] = M.data.copy()
            if beta is not None:
                trace["hg.beta"] = beta.data.copy()
        layers = [hypergraph.self_gate_init(V, P["hg.gate_w"], P["hg.gate_r"], valid)]
        for _ in range(cfg.hyper_layers):
            layers.append(op(layers[-1]))
        x_avg = hypergraph.layer_average(layers)
        masked = batch.labels != 0
        pool, empty = hypergraph.pool_matrix(valid, masked, cfg.q1, cfg.q2)
        return lift(pool) @ x_avg, structure, empty

    def forward(self, batch: Batch, rng: np.random.Generator | None = None, trace=None) -> Forward:
        """``rng`` enables dropout (training); pass None for deterministic evaluation."""
        cfg, P = self.cfg, self.params
        h = encoder.encode(
            batch.items, batch.behaviors, P, cfg.L, cfg.heads, cfg.p1, cfg.p2,
            p_drop=cfg.dropout if rng is not None else 0.0, rng=rng, trace=trace,
            multiscale=not cfg.no_ms_attention,
        )
        if cfg.no_hypergraph:
            return Forward(h, None, h, None)
        x, structure, empty = self.hypergraph_view(batch, trace)
        g, alpha = cross_view_attention(h, x, P["fusion.a"], P["fusion.wa"])
        return Forward(h, x, g, alpha, structure, empty)

    def masked_logits(self, batch: Batch, rng=None) -> tuple[Tensor, np.ndarray]:
        """Logits over the catalog at every masked position, and the 0-based true item columns."""
        out = self.forward(batch, rng)
        flat = np.flatnonzero(batch.labels.reshape(-1))
        g = out.g.reshape(-1, out.g.shape[-1])[flat]
        return score_items(g, self.params["item_emb"]), batch.labels.reshape(-1)[flat] - 1

    def loss(self, batch: Batch, rng=None) -> Tensor:
        logits, labels = self.masked_logits(batch, rng)
        return cloze_loss(logits, labels)

    def score_last_masked(self, batch: Batch) -> np.ndarray:
        """[B, n_items] scores at each sequence's last masked position (column t-1 = item token t)."""
        out = self.forward(batch, None)
        pos = np.array([np.flatnonzero(row)[-1] for row in batch.labels])
        g = out.g[np.arange(batch.size), pos]
        return score_items(g, self.params["item_emb"]).data
