"""Export attention maps, view weights and hypergraph matrices for one user."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import hypergraph
from .data import BehaviorSequence, Vocabulary, collate
from .errors import LookupFailure
from .model import Recommender
from .tensor import Tensor, no_grad


def write_matrix(path, matrix: np.ndarray, row_labels=None, col_labels=None, delimiter: str = "\t") -> Path:
    """Header ``row`` + column labels, then one labelled line per matrix row (values in repr form)."""
    matrix = np.asarray(matrix)
    rows = row_labels if row_labels is not None else [str(i) for i in range(matrix.shape[0])]
    cols = col_labels if col_labels is not None else [str(j) for j in range(matrix.shape[1])]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["row", *cols])
        for label, values in zip(rows, matrix):
            w.writerow([label, *(repr(float(v)) for v in values)])
    return path


def read_matrix(path, delimiter: str = "\t") -> tuple[np.ndarray, list[str], list[str]]:
    with Path(path).open(newline="") as fh:
        lines = list(csv.reader(fh, delimiter=delimiter))
    cols = lines[0][1:]
    rows = [line[0] for line in lines[1:]]
    values = np.array([[float(v) for v in line[1:]] for line in lines[1:]]).reshape(len(rows), len(cols))
    return values, rows, cols


def _position_labels(seq: BehaviorSequence, vocab: Vocabulary) -> list[str]:
    out = []
    for j, (item, beh) in enumerate(zip(seq.items, seq.behaviors)):
        if item == 0:
            out.append(f"{j}:pad")
        elif item == vocab.item_mask:
            out.append(f"{j}:mask")
        else:
            out.append(f"{j}:{vocab.raw_item(int(item))}/{vocab.behaviors[int(beh) - 1]}")
    return out


def export_inspection(
    model: Recommender, sequences: dict[int, BehaviorSequence], vocab: Vocabulary, user: int, out_dir,
) -> dict[str, Path]:
    """Write per-scale attention maps, alpha pairs, the incidence matrix, M' and M M^T.

    ``sequences`` maps user id to an evaluation-masked input (e.g. the test split).
    """
    if user not in sequences:
        raise LookupFailure(f"unknown user {user}")
    seq = sequences[user]
    batch = collate([seq])
    out_dir = Path(out_dir)
    labels = _position_labels(seq, vocab)
    trace: dict[str, np.ndarray] = {}
    files: dict[str, Path] = {}
    with no_grad():
        fwd = model.forward(batch, None, trace)
    for tag, weights in trace.items():
        if tag.startswith("hg."):
            continue
        w = weights[0]  # [heads, queries, keys]
        for head in range(w.shape[0]):
            name = f"attention_{tag}_head{head}"
            rows = labels if w.shape[1] == len(labels) else None
            files[name] = write_matrix(out_dir / f"{name}.tsv", w[head], rows)
    if fwd.alpha is None:
        return files

    alpha = fwd.alpha.data[0]
    path = out_dir / "alpha.tsv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["position", "label", "alpha_sequential", "alpha_hypergraph"])
        for j, (a1, a2) in enumerate(alpha):
            w.writerow([j, labels[j], repr(float(a1)), repr(float(a2))])
    files["alpha"] = path

    cfg = model.cfg
    use_sem, use_beh = not cfg.no_ml_hyper, not cfg.no_mb_hyper
    s = fwd.structure
    beta = trace.get("hg.beta")
    with no_grad():
        beta_t = None if beta is None else Tensor(beta)
        M = hypergraph.incidence_blocks(s, beta_t, semantic=use_sem, behavior=use_beh).data[0]
        Mprime = hypergraph.simplified_matrix(s, beta_t, cfg.w0, semantic=use_sem, behavior=use_beh).data[0]
    single = hypergraph.Structure(s.valid[0], s.anchor[0], s.own[0], s.semantic[0], s.behavior[0], s.same_item[0])
    compact = hypergraph.compact_incidence(single, M, seq.items, semantic=use_sem, behavior=use_beh)
    col_labels = [
        f"{kind}:{vocab.raw_item(item)}@{anchor}" for kind, item, anchor in zip(compact.kinds, compact.items, compact.anchors)
    ]
    files["incidence"] = write_matrix(out_dir / "incidence.tsv", compact.values, labels, col_labels)
    files["simplified_operator"] = write_matrix(out_dir / "simplified_operator.tsv", Mprime, labels, labels)
    files["incidence_gram"] = write_matrix(out_dir / "incidence_gram.tsv", compact.values @ compact.values.T, labels, labels)
    return files
