"""Run configuration: every tunable in one validated, hashable record."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

CONV_MODES = ("full", "simplified")
# (C, p1, p2) grid searched for the multi-scale attention
SCALE_GRID = ((20, 4, 20), (20, 8, 40), (40, 4, 20), (40, 8, 40))
W0_GRID = (0.05, 0.1, 0.15, 0.2)
K_GRID = (4, 6, 8, 10, 12, 14)

# fields that locate outputs rather than define the run
_UNHASHED = {"output_dir"}


@dataclass
class RunConfig:
    # data
    data_path: str | None = None
    delimiter: str = ","
    header: bool | None = None
    behaviors: tuple[str, ...] = ("pv", "fav", "cart", "buy")
    target: str = "buy"
    # sequence encoder
    J: int = 40
    d: int = 64
    L: int = 2
    heads: int = 2
    C: int = 20
    p1: int = 4
    p2: int = 20
    d_h: int | None = None
    dropout: float = 0.2
    # hypergraph view
    k: int = 8
    w0: float = 0.1
    q1: int = 2
    q2: int = 2
    metric_channels: int = 2
    hyper_layers: int = 2
    conv_mode: str = "simplified"
    # ablations
    no_mb_hyper: bool = False
    no_ml_hyper: bool = False
    no_hypergraph: bool = False
    no_ms_attention: bool = False
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    # evaluation
    eval_ns: tuple[int, ...] = (5, 10)
    n_neg: int = 100
    output_dir: str = "runs"

    def __post_init__(self):
        self.behaviors = tuple(self.behaviors)
        self.eval_ns = tuple(int(n) for n in self.eval_ns)

    @property
    def ffn_width(self) -> int:
        return self.d_h if self.d_h is not None else 4 * self.d

    def validate(self) -> RunConfig:
        checks = [
            (self.J >= 2, "J must be at least 2"),
            (self.C >= 1 and self.p1 >= 1 and self.p2 >= 1, "C, p1, p2 must be positive"),
            (self.J % max(self.C, 1) == 0, "J not divisible by C"),
            (self.J % max(self.p1, 1) == 0, "J not divisible by p1"),
            (self.J % max(self.p2, 1) == 0, "J not divisible by p2"),
            (self.heads >= 1 and self.d % self.heads == 0, "d not divisible by heads"),
            (self.conv_mode in CONV_MODES, f"conv_mode must be one of {CONV_MODES}"),
            (len(set(self.behaviors)) == len(self.behaviors), "behavior labels must be unique"),
            (self.target in self.behaviors, "exactly one declared behavior must be the target"),
            (self.k >= 1, "k must be at least 1"),
            (self.L >= 0, "L must be non-negative"),
            (self.hyper_layers >= 1, "hyper_layers must be at least 1"),
            (self.metric_channels >= 1, "metric_channels must be at least 1"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (self.q1 >= 0 and self.q2 >= 0, "q1, q2 must be non-negative"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.n_neg >= 1, "n_neg must be positive"),
            (len(self.eval_ns) > 0 and min(self.eval_ns) >= 1, "eval_ns must be positive"),
            (
                not (self.no_mb_hyper and self.no_ml_hyper),
                "removing both hyperedge families is the no_hypergraph variant",
            ),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["behaviors"] = list(self.behaviors)
        out["eval_ns"] = list(self.eval_ns)
        return out

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.config_hash()[:16]

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


def from_mapping(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """JSON key-value file (optional) with ``overrides`` applied on top, validated."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_mapping(values).validate()
