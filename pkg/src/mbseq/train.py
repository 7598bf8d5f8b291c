"""Training loop, leave-one-out ranking evaluation, and report tables."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .config import RunConfig
from .data import (
    Batch,
    BehaviorSequence,
    Event,
    LogSchema,
    NegativeSampler,
    Vocabulary,
    build_sequences,
    collate,
    split_leave_one_out,
)
from .errors import TrainingError
from .model import Recommender
from .optim import Adam
from .tensor import no_grad

log = logging.getLogger(__name__)

# offset keeps the evaluation negatives stream apart from the training stream
_EVAL_SEED_OFFSET = 7919

Scorer = Callable[[Batch], np.ndarray]


@dataclass
class Splits:
    vocab: Vocabulary
    train: dict[int, BehaviorSequence]
    valid: dict[int, BehaviorSequence]
    test: dict[int, BehaviorSequence]
    excluded: int = 0


def prepare_splits(sequences: dict[int, BehaviorSequence], vocab: Vocabulary, J: int, excluded: int = 0) -> Splits:
    train, valid, test = split_leave_one_out(sequences, vocab, J)
    return Splits(vocab, train, valid, test, excluded)


def full_history(events: list[Event], schema: LogSchema) -> tuple[dict[int, BehaviorSequence], Vocabulary, int]:
    """Per-user sequences long enough to hold every event, so splitting never loses history."""
    vocab = Vocabulary.from_events(events, schema)
    counts: dict[int, int] = {}
    for e in events:
        counts[e.user_id] = counts.get(e.user_id, 0) + 1
    longest = max(counts.values(), default=2)
    sequences, excluded = build_sequences(events, vocab, max(longest, 2))
    return sequences, vocab, excluded


def prepare(events: list[Event], schema: LogSchema, J: int) -> Splits:
    sequences, vocab, excluded = full_history(events, schema)
    return prepare_splits(sequences, vocab, J, excluded)


@dataclass
class RankingMetrics:
    hr: dict[int, float]
    ndcg: dict[int, float]
    mrr: float
    users_evaluated: int

    def as_row(self) -> dict[str, float]:
        row: dict[str, float] = {"users": self.users_evaluated}
        for n in sorted(self.hr):
            row[f"hr@{n}"] = self.hr[n]
            row[f"ndcg@{n}"] = self.ndcg[n]
        row["mrr"] = self.mrr
        return row


def rank_of_truth(truth_score: float, truth_id: int, neg_scores: np.ndarray, neg_ids: np.ndarray) -> int:
    """1-based rank among 1 + len(negatives); equal scores rank the lower item id first."""
    neg_scores = np.asarray(neg_scores)
    neg_ids = np.asarray(neg_ids)
    ahead = (neg_scores > truth_score) | ((neg_scores == truth_score) & (neg_ids < truth_id))
    return 1 + int(ahead.sum())


def metrics_from_ranks(ranks, ns=(5, 10)) -> RankingMetrics:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return RankingMetrics({n: 0.0 for n in ns}, {n: 0.0 for n in ns}, 0.0, 0)
    hr, ndcg = {}, {}
    for n in ns:
        hit = ranks <= n
        hr[n] = float(hit.mean())
        ndcg[n] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return RankingMetrics(hr, ndcg, float((1.0 / ranks).mean()), int(ranks.size))


def _batches(seqs: list[BehaviorSequence], size: int):
    for start in range(0, len(seqs), size):
        yield start // size, seqs[start : start + size]


def evaluate(
    model: Union[Recommender, Scorer],
    split: dict[int, BehaviorSequence],
    vocab: Vocabulary,
    ns=(5, 10),
    n_neg: int = 100,
    seed: int = 0,
    batch_size: int = 64,
) -> RankingMetrics:
    """Rank each user's held-out item against ``n_neg`` popularity-sampled negatives.

    ``model`` is a :class:`Recommender` or any callable mapping a batch to
    ``[B, n_items]`` scores (column ``t - 1`` scores item token ``t``).  The
    negatives depend only on ``seed`` and the split, never on the model.
    """
    scorer = model.score_last_masked if isinstance(model, Recommender) else model
    sampler = NegativeSampler(vocab.frequencies)
    rng = np.random.default_rng(seed + _EVAL_SEED_OFFSET)
    users = sorted(split)
    ranks = []
    with no_grad():
        for _, chunk in _batches([split[u] for u in users], batch_size):
            batch = collate(chunk)
            scores = np.asarray(scorer(batch))
            for row, seq in enumerate(chunk):
                truth = int(seq.labels[seq.masked_positions[-1]])
                negs = sampler.sample(seq.user, truth, n_neg, rng).candidates
                ranks.append(rank_of_truth(scores[row, truth - 1], truth, scores[row, negs - 1], negs))
    return metrics_from_ranks(ranks, ns)


@dataclass
class EpochRow:
    epoch: int
    loss: float
    seconds: float
    valid: RankingMetrics | None = None


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]

    @property
    def convergence_epoch(self) -> int | None:
        return self.best_epoch

    def write_tsv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        metric_cols: list[str] = []
        for r in self.rows:
            if r.valid is not None:
                metric_cols = [f"valid_{k}" for k in r.valid.as_row()]
                break
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["epoch", "loss", "seconds", *metric_cols, "best"])
            for r in self.rows:
                vals = list(r.valid.as_row().values()) if r.valid is not None else [""] * len(metric_cols)
                w.writerow([r.epoch, repr(r.loss), f"{r.seconds:.6f}", *vals, int(r.epoch == self.best_epoch)])
        return path


def train_epoch(
    model: Recommender, train: dict[int, BehaviorSequence], optimizer: Adam,
    batch_size: int, rng: np.random.Generator, epoch: int = 0,
) -> EpochRow:
    """One pass over shuffled users; returns the mean masked-item loss over batches."""
    users = sorted(train)
    order = [train[users[i]] for i in rng.permutation(len(users))]
    start = time.perf_counter()
    total, count = 0.0, 0
    for batch_id, chunk in _batches(order, batch_size):
        batch = collate(chunk)
        loss = model.loss(batch, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch_id}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += value
        count += 1
    return EpochRow(epoch, total / max(count, 1), time.perf_counter() - start)


def make_optimizer(model: Recommender, cfg: RunConfig) -> Adam:
    return Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def fit(
    model: Recommender, splits: Splits, cfg: RunConfig,
    on_epoch: Callable[[EpochRow], None] | None = None,
) -> TrainReport:
    """Train with early stopping on validation HR at the smallest cutoff; keeps the best parameters."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    report = TrainReport()
    key = min(cfg.eval_ns)
    best_score, best_state, stale = -1.0, None, 0
    for epoch in range(cfg.epochs):
        row = train_epoch(model, splits.train, optimizer, cfg.batch_size, rng, epoch)
        row.valid = evaluate(model, splits.valid, splits.vocab, cfg.eval_ns, cfg.n_neg, cfg.seed, cfg.batch_size)
        report.rows.append(row)
        log.info("epoch %d loss %.5f valid hr@%d %.4f (%.2fs)", epoch, row.loss, key, row.valid.hr[key], row.seconds)
        if on_epoch is not None:
            on_epoch(row)
        if row.valid.hr[key] > best_score:
            best_score, stale = row.valid.hr[key], 0
            best_state = {name: value.copy() for name, value in model.state().items()}
            report.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stopped_early = True
                break
    if best_state is not None:
        model.load_state(best_state)
    return report


def write_metrics(path, metrics: dict[str, RankingMetrics]) -> Path:
    """One row per split with users, hr@N, ndcg@N and mrr columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = next(iter(metrics.values())).as_row()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["split", *first])
        for name, m in metrics.items():
            w.writerow([name, *m.as_row().values()])
    return path


def format_metrics(name: str, m: RankingMetrics) -> str:
    parts = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in m.as_row().items()]
    return f"{name}: " + " ".join(parts)
