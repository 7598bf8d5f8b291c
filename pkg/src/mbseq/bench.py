"""Wall-clock comparisons: dense vs. low-rank attention, full vs. simplified hyperconvolution."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import hypergraph
from .encoder import lowrank_attention, scale_attention
from .tensor import Tensor, no_grad

ATTENTION_COLUMNS = ("method", "J", "d", "C", "batch", "repeats", "median_s", "min_s", "max_abs_diff")
HYPERCONV_COLUMNS = (
    "J", "d", "k", "w0", "batch", "repeats", "full_median_s", "simplified_median_s",
    "speedup", "max_abs_diff", "mean_abs_diff", "rel_frobenius", "oracle_max_diff", "constant_max_dev",
)


def time_interleaved(fns: dict[str, Callable[[], object]], repeats: int = 30, warmup: int = 2) -> dict[str, list[float]]:
    """Round-robin timing so slow drifts in machine load hit every variant alike."""
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    out: dict[str, list[float]] = {name: [] for name in fns}
    for _ in range(repeats):
        for name, fn in fns.items():
            start = time.perf_counter()
            fn()
            out[name].append(time.perf_counter() - start)
    return out


def dense_attention_oracle(H: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Plain numpy single-head softmax(Q K^T / sqrt(d)) V."""
    q, k, v = H @ wq, H @ wk, H @ wv
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    return (w / w.sum(axis=-1, keepdims=True)) @ v


@dataclass
class BenchTable:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def write_tsv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([row[c] for c in self.columns])
        return path


def benchmark_attention(
    J: int = 200, d: int = 64, Cs=(1, 5, 10, 20), repeats: int = 30, batch: int = 16, seed: int = 0,
) -> BenchTable:
    """Median forward time of dense attention and of low-rank attention at each C.

    A ``dense`` row uses C = 1 by convention.  ``max_abs_diff`` is filled for
    the low-rank C = 1 row with identity E = F against the dense output.
    """
    bad = [c for c in Cs if J % c]
    if bad:
        raise ValueError(f"J={J} not divisible by C in {bad}")
    rng = np.random.default_rng(seed)
    H = Tensor(rng.normal(size=(batch, J, d)))
    wq, wk, wv = (Tensor(rng.normal(scale=d**-0.5, size=(d, d))) for _ in range(3))
    table = BenchTable(ATTENTION_COLUMNS)
    variants: dict[str, Callable[[], object]] = {"dense": lambda: scale_attention(H, wq, wk, wv)}
    diffs: dict[int, object] = {}
    with threadpool_limits(limits=1), no_grad():
        dense_out = scale_attention(H, wq, wk, wv).data
        for C in Cs:
            r = J // C
            E = Tensor(rng.normal(scale=J**-0.5, size=(r, J)))
            F = Tensor(rng.normal(scale=J**-0.5, size=(r, J)))
            variants[f"lowrank{C}"] = lambda E=E, F=F: lowrank_attention(H, E, F, wq, wk, wv)
            if C == 1:
                eye = Tensor(np.eye(J))
                diffs[C] = float(np.abs(lowrank_attention(H, eye, eye, wq, wk, wv).data - dense_out).max())
        times = time_interleaved(variants, repeats)
    for name, t in times.items():
        C = 1 if name == "dense" else int(name[len("lowrank"):])
        table.rows.append(dict(
            method="dense" if name == "dense" else "lowrank", J=J, d=d, C=C, batch=batch, repeats=repeats,
            median_s=statistics.median(t), min_s=min(t),
            max_abs_diff="" if name == "dense" else diffs.get(C, ""),
        ))
    return table


@dataclass
class HyperInstance:
    items: np.ndarray
    valid: np.ndarray
    X: np.ndarray
    beta: np.ndarray
    structure: hypergraph.Structure


def random_instance(J: int, d: int, k: int, batch: int = 1, rng=None, mask_rate: float = 0.1) -> HyperInstance:
    """Random sequences with repeated items and some masked positions.

    Embeddings and channel weights are non-negative, so every beta is too and
    both operators are row-stochastic.
    """
    rng = rng if rng is not None else np.random.default_rng()
    items = rng.integers(1, max(2, J // 2), size=(batch, J))
    valid = rng.random((batch, J)) >= mask_rate
    V = Tensor(rng.random((batch, J, d)) * valid[..., None])
    metric = Tensor(rng.uniform(0.5, 1.5, size=(2, d)))
    beta = hypergraph.semantic_scores(V, metric).data
    structure = hypergraph.build_structure(items, valid, beta, k)
    return HyperInstance(items, valid, rng.normal(size=(batch, J, d)), beta, structure)


def hyperconv_full_oracle(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Explicit D_v^-1 M D_e^-1 M^T X with diagonal matrices; zero-degree rows pass through."""
    A = np.abs(M)
    dv, de = A.sum(axis=1), A.sum(axis=0)
    Dv = np.diag(np.where(dv > 0, 1.0 / np.where(dv > 0, dv, 1.0), 0.0))
    De = np.diag(np.where(de > 0, 1.0 / np.where(de > 0, de, 1.0), 0.0))
    out = Dv @ M @ De @ M.T @ X
    return np.where((dv > 0)[:, None], out, X)


def benchmark_hyperconv(
    Js=(50, 100, 200), d: int = 64, k: int = 8, w0: float = 0.1, repeats: int = 30, batch: int = 8, seed: int = 0,
) -> BenchTable:
    """Median time of one full vs. one simplified propagation (operator construction included).

    The shared top-k structure is built once outside the timed region.
    """
    rng = np.random.default_rng(seed)
    table = BenchTable(HYPERCONV_COLUMNS)
    with threadpool_limits(limits=1), no_grad():
        for J in Js:
            inst = random_instance(J, d, k, batch, rng)
            beta, X = Tensor(inst.beta), Tensor(inst.X)

            def full():
                M = hypergraph.incidence_blocks(inst.structure, beta)
                return hypergraph.full_operator(M)(X)

            def simplified():
                Mp = hypergraph.simplified_matrix(inst.structure, beta, w0)
                return hypergraph.simplified_operator(Mp)(X)

            out_full, out_simp = full().data, simplified().data
            diff = np.abs(out_full - out_simp)
            M = hypergraph.incidence_blocks(inst.structure, beta).data
            oracle = max(float(np.abs(hyperconv_full_oracle(inst.X[b], M[b]) - out_full[b]).max()) for b in range(batch))
            ones = Tensor(np.ones((batch, J, d)))
            const_dev = max(
                float(np.abs(hypergraph.full_operator(Tensor(M))(ones).data - 1.0).max()),
                float(np.abs(hypergraph.simplified_operator(hypergraph.simplified_matrix(inst.structure, beta, w0))(ones).data - 1.0).max()),
            )
            times = time_interleaved({"full": full, "simplified": simplified}, repeats)
            mf, ms = statistics.median(times["full"]), statistics.median(times["simplified"])
            table.rows.append(dict(
                J=J, d=d, k=k, w0=w0, batch=batch, repeats=repeats, full_median_s=mf, simplified_median_s=ms,
                speedup=mf / ms, max_abs_diff=float(diff.max()), mean_abs_diff=float(diff.mean()),
                rel_frobenius=float(np.linalg.norm(out_full - out_simp) / max(np.linalg.norm(out_full), 1e-300)),
                oracle_max_diff=oracle, constant_max_dev=const_dev,
            ))
    return table
