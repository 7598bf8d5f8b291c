"""Synthetic multi-behavior event logs for tests and smoke runs."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import Event, LogSchema

FOUR_BEHAVIORS = ("pv", "fav", "cart", "buy")


def planted_chains(
    n_users: int = 50,
    n_items: int = 30,
    chains: tuple[int, int] = (4, 6),
    seed: int = 0,
    pattern: tuple[str, ...] = ("pv", "fav", "buy"),
) -> tuple[list[Event], LogSchema]:
    """Each user walks through several view -> favorite -> buy chains on one item each.

    Chain items are drawn without replacement per user, so the buy at the end of
    a chain is always the item seen in the two preceding interactions.
    """
    rng = np.random.default_rng(seed)
    events = []
    for user in range(1, n_users + 1):
        k = int(rng.integers(chains[0], chains[1] + 1))
        items = rng.choice(np.arange(1, n_items + 1), size=k, replace=False)
        t = 0
        for item in items:
            for behavior in pattern:
                t += 1
                events.append(Event(user, int(item), behavior, t))
    return events, LogSchema(FOUR_BEHAVIORS, "buy")


def random_log(
    n_users: int = 40,
    n_items: int = 25,
    length: tuple[int, int] = (3, 30),
    seed: int = 0,
    behaviors: tuple[str, ...] = FOUR_BEHAVIORS,
    target_rate: float = 0.25,
) -> tuple[list[Event], LogSchema]:
    """Users with random lengths, items and behaviors (target drawn at ``target_rate``)."""
    rng = np.random.default_rng(seed)
    target = behaviors[-1]
    aux = behaviors[:-1]
    events = []
    for user in range(1, n_users + 1):
        n = int(rng.integers(length[0], length[1] + 1))
        stamps = np.sort(rng.integers(0, 10_000, size=n))
        for ts in stamps:
            b = target if rng.random() < target_rate else aux[int(rng.integers(len(aux)))]
            events.append(Event(user, int(rng.integers(1, n_items + 1)), b, int(ts)))
    return events, LogSchema(behaviors, target)


def write_log(path, events: list[Event], delimiter: str = ",", header: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        if header:
            writer.writerow(["user_id", "item_id", "behavior", "timestamp"])
        for e in events:
            writer.writerow([e.user_id, e.item_id, e.behavior, e.timestamp])
    return path
