"""Event-log ingestion and behavior-aware sequence preparation.

Token conventions: item token 0 is PAD, items map to 1..n in ascending raw-id
order and n+1 is MASK.  Behaviors follow the same scheme over the declared
behavior vocabulary.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, SchemaError

log = logging.getLogger(__name__)

PAD = 0
TRAIN, EVAL = "train", "eval"


@dataclass(frozen=True)
class Event:
    user_id: int
    item_id: int
    behavior: str
    timestamp: int


@dataclass(frozen=True)
class LogSchema:
    behaviors: tuple[str, ...]
    target: str
    delimiter: str = ","
    header: bool | None = None  # None: detect from the first row

    def __post_init__(self):
        object.__setattr__(self, "behaviors", tuple(self.behaviors))
        if len(set(self.behaviors)) != len(self.behaviors):
            raise ConfigError(f"duplicate behavior labels in {self.behaviors}")
        if self.target not in self.behaviors:
            raise ConfigError(f"target behavior {self.target!r} is not in {self.behaviors}")


@dataclass
class ParsedLog:
    events: list[Event]
    malformed: int = 0
    malformed_rows: list[int] = field(default_factory=list)


def parse_event_log(path, schema: LogSchema, strict: bool = False) -> ParsedLog:
    """Read ``user, item, behavior, timestamp`` rows and sort them by (user, timestamp).

    Malformed rows (wrong arity, non-integer ids) are skipped and counted unless
    ``strict``; an unknown behavior label always raises.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"event log not found: {path}")
    allowed = set(schema.behaviors)
    events: list[Event] = []
    bad: list[int] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = [cell.strip() for cell in row]
            if lineno == 1 and _is_header(cells, schema.header):
                continue
            try:
                if len(cells) != 4:
                    raise ValueError(f"expected 4 fields, got {len(cells)}")
                user, item, behavior, ts = int(cells[0]), int(cells[1]), cells[2], int(float(cells[3]))
            except ValueError as exc:
                if strict:
                    raise SchemaError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from exc
                bad.append(lineno)
                continue
            if behavior not in allowed:
                raise SchemaError(f"{path}:{lineno}: unknown behavior {behavior!r}; expected one of {sorted(allowed)}")
            events.append(Event(user, item, behavior, ts))
    if bad:
        log.warning("skipped %d malformed row(s) in %s", len(bad), path)
    # stable sort keeps file order among equal timestamps
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    return ParsedLog(events, len(bad), bad)


def _is_header(cells: list[str], declared: bool | None) -> bool:
    if declared is not None:
        return declared
    try:
        int(cells[0])
        return False
    except (ValueError, IndexError):
        return True


class Vocabulary:
    """Token maps for items and behaviors, plus the global item-frequency table."""

    def __init__(self, item_ids: Iterable[int], behaviors: Iterable[str], target: str, counts=None):
        self.item_ids = np.array(sorted(set(int(i) for i in item_ids)), dtype=np.int64)
        self.behaviors = tuple(behaviors)
        if target not in self.behaviors:
            raise ConfigError(f"target behavior {target!r} is not in {self.behaviors}")
        self.target = target
        self._item_index = {int(raw): k + 1 for k, raw in enumerate(self.item_ids)}
        self.frequencies = np.zeros(self.n_items + 2, dtype=np.int64)
        if counts is not None:
            for raw, c in counts.items():
                self.frequencies[self._item_index[int(raw)]] = c

    @classmethod
    def from_events(cls, events: list[Event], schema: LogSchema) -> Vocabulary:
        counts = Counter(e.item_id for e in events)
        return cls(counts.keys(), schema.behaviors, schema.target, counts)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def item_mask(self) -> int:
        return self.n_items + 1

    @property
    def behavior_mask(self) -> int:
        return self.n_behaviors + 1

    @property
    def target_token(self) -> int:
        return self.behaviors.index(self.target) + 1

    def item_token(self, raw: int) -> int:
        return self._item_index[int(raw)]

    def behavior_token(self, name: str) -> int:
        return self.behaviors.index(name) + 1

    def raw_item(self, token: int) -> int:
        return int(self.item_ids[token - 1])


@dataclass
class BehaviorSequence:
    """A front-padded window of J (item, behavior) tokens for one user.

    ``labels`` holds the true item token at masked positions and 0 elsewhere.
    """

    user: int
    items: np.ndarray
    behaviors: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray

    @property
    def length(self) -> int:
        return int(self.items.shape[0])

    @property
    def attention_mask(self) -> np.ndarray:
        return self.items != PAD

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.labels)

    def real(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        keep = self.attention_mask
        return self.items[keep], self.behaviors[keep], self.timestamps[keep]


def _window(user: int, items, behaviors, timestamps, J: int) -> BehaviorSequence:
    items, behaviors, timestamps = (np.asarray(a, dtype=np.int64)[-J:] for a in (items, behaviors, timestamps))
    pad = J - items.shape[0]
    fill = np.zeros(pad, dtype=np.int64)
    return BehaviorSequence(
        user,
        np.concatenate([fill, items]),
        np.concatenate([fill, behaviors]),
        np.concatenate([fill, timestamps]),
        np.zeros(J, dtype=np.int64),
    )


def build_sequences(
    events: list[Event], vocab: Vocabulary, J: int, min_targets: int = 2
) -> tuple[dict[int, BehaviorSequence], int]:
    """Most recent ``J`` interactions per user, front-padded.

    Users whose window holds fewer than ``min_targets`` target-behavior
    events are dropped; the second return value counts them.
    """
    if J < 2:
        raise ConfigError("J must be at least 2")
    per_user: dict[int, list[Event]] = defaultdict(list)
    for e in events:
        per_user[e.user_id].append(e)
    out: dict[int, BehaviorSequence] = {}
    excluded = 0
    target = vocab.target_token
    for user in sorted(per_user):
        evs = sorted(per_user[user], key=lambda e: e.timestamp)
        seq = _window(
            user,
            [vocab.item_token(e.item_id) for e in evs],
            [vocab.behavior_token(e.behavior) for e in evs],
            [e.timestamp for e in evs],
            J,
        )
        if int(np.sum(seq.behaviors == target)) < min_targets:
            excluded += 1
            continue
        out[user] = seq
    if excluded:
        log.info("excluded %d user(s) with fewer than %d target events", excluded, min_targets)
    return out, excluded


def apply_cloze_mask(seq: BehaviorSequence, vocab: Vocabulary, mode: str) -> BehaviorSequence | None:
    """Replace target-behavior positions by MASK tokens.

    ``train`` masks every target position, ``eval`` only the last one.
    Returns None when the sequence has no target position to mask.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    positions = np.flatnonzero((seq.behaviors == vocab.target_token) & seq.attention_mask)
    if positions.size == 0:
        return None
    if mode == EVAL:
        positions = positions[-1:]
    items, behaviors, labels = seq.items.copy(), seq.behaviors.copy(), np.zeros_like(seq.labels)
    labels[positions] = items[positions]
    items[positions] = vocab.item_mask
    behaviors[positions] = vocab.behavior_mask
    return replace(seq, items=items, behaviors=behaviors, labels=labels)


@dataclass
class NegativeSample:
    user: int
    candidates: np.ndarray
    exhausted: bool = False


class NegativeSampler:
    """Popularity-proportional negatives drawn without replacement."""

    def __init__(self, frequencies: np.ndarray):
        freq = np.asarray(frequencies, dtype=np.float64).copy()
        freq[PAD] = 0.0
        freq[-1] = 0.0  # MASK token
        self.frequencies = freq

    def sample(self, user: int, truth: int, n: int, rng: np.random.Generator) -> NegativeSample:
        weights = self.frequencies.copy()
        weights[truth] = 0.0
        available = np.flatnonzero(weights > 0)
        if available.size <= n:
            return NegativeSample(user, available.astype(np.int64), exhausted=available.size < n)
        p = weights[available] / weights[available].sum()
        picks = rng.choice(available, size=n, replace=False, p=p)
        return NegativeSample(user, picks.astype(np.int64))


def sample_negatives(
    user: int, truth: int, frequencies: np.ndarray, n: int = 100, rng: np.random.Generator | None = None
) -> NegativeSample:
    rng = rng if rng is not None else np.random.default_rng()
    return NegativeSampler(frequencies).sample(user, truth, n, rng)


def split_leave_one_out(
    sequences: dict[int, BehaviorSequence], vocab: Vocabulary, J: int | None = None
) -> tuple[dict[int, BehaviorSequence], dict[int, BehaviorSequence], dict[int, BehaviorSequence]]:
    """Last target event is the test item, the one before it validation, the rest train.

    Each split's input ends at its held-out event (later interactions are
    dropped) and is re-padded to ``J``.  Users whose training prefix has no
    target event are left out of ``train``.
    """
    train, valid, test = {}, {}, {}
    target = vocab.target_token
    for user, seq in sequences.items():
        J_out = J or seq.length
        items, behaviors, stamps = seq.real()
        targets = np.flatnonzero(behaviors == target)
        if targets.size < 2:
            continue
        last, prev = targets[-1], targets[-2]
        test[user] = apply_cloze_mask(_window(user, items[: last + 1], behaviors[: last + 1], stamps[: last + 1], J_out), vocab, EVAL)
        valid[user] = apply_cloze_mask(_window(user, items[: prev + 1], behaviors[: prev + 1], stamps[: prev + 1], J_out), vocab, EVAL)
        if prev > 0:
            masked = apply_cloze_mask(_window(user, items[:prev], behaviors[:prev], stamps[:prev], J_out), vocab, TRAIN)
            if masked is not None:
                train[user] = masked
    return train, valid, test


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    behaviors: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.items.shape[0])


def collate(seqs: list[BehaviorSequence]) -> Batch:
    return Batch(
        np.array([s.user for s in seqs], dtype=np.int64),
        np.stack([s.items for s in seqs]),
        np.stack([s.behaviors for s in seqs]),
        np.stack([s.labels for s in seqs]),
    )


def save_sequence_cache(path, sequences: dict[int, BehaviorSequence], vocab: Vocabulary) -> None:
    users = sorted(sequences)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(
            fh,
            users=np.array(users, dtype=np.int64),
            items=np.stack([sequences[u].items for u in users]),
            behaviors=np.stack([sequences[u].behaviors for u in users]),
            timestamps=np.stack([sequences[u].timestamps for u in users]),
            labels=np.stack([sequences[u].labels for u in users]),
            item_ids=vocab.item_ids,
            frequencies=vocab.frequencies,
            behavior_names=np.array(vocab.behaviors),
            target=np.array(vocab.target),
        )


def load_sequence_cache(path) -> tuple[dict[int, BehaviorSequence], Vocabulary]:
    with np.load(path, allow_pickle=False) as z:
        vocab = Vocabulary(z["item_ids"], [str(b) for b in z["behavior_names"]], str(z["target"]))
        vocab.frequencies = z["frequencies"].copy()
        sequences = {
            int(u): BehaviorSequence(int(u), z["items"][k], z["behaviors"][k], z["timestamps"][k], z["labels"][k])
            for k, u in enumerate(z["users"])
        }
    return sequences, vocab
