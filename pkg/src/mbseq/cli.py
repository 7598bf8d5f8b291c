"""Command-line entry point: ingest, train, eval, bench, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bench, checkpoint, inspection
from .config import RunConfig, load_config
from .data import LogSchema, load_sequence_cache, parse_event_log, save_sequence_cache
from .errors import ConfigError, LookupFailure, SchemaError, TrainingError
from .model import Recommender
from .train import Splits, evaluate, fit, format_metrics, full_history, prepare_splits, write_metrics

log = logging.getLogger("mbseq")

OUTPUT_ENV = "MBSEQ_OUTPUT"
EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_LOOKUP, EXIT_DATA, EXIT_TRAINING = 2, 3, 4, 5, 6

CACHE_NAME = "sequences.npz"
CHECKPOINT_NAME = "model.ckpt"


class MissingCheckpoint(FileNotFoundError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then the output-root environment variable, then flags (flags win)."""
    overrides: dict = {}
    env_root = os.environ.get(OUTPUT_ENV)
    if env_root:
        overrides["output_dir"] = env_root
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    for flag, key in (("data", "data_path"), ("output_dir", "output_dir"), ("seed", "seed"),
                      ("epochs", "epochs"), ("conv_mode", "conv_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.config is not None and not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


def _schema(cfg: RunConfig) -> LogSchema:
    return LogSchema(cfg.behaviors, cfg.target, cfg.delimiter, cfg.header)


def _write_config(cfg: RunConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def cmd_ingest(cfg: RunConfig) -> Path:
    if not cfg.data_path:
        raise ConfigError("data_path is required (set it in the config or pass --data)")
    parsed = parse_event_log(cfg.data_path, _schema(cfg))
    sequences, vocab, excluded = full_history(parsed.events, _schema(cfg))
    run_dir = cfg.run_dir()
    _write_config(cfg)
    cache = run_dir / CACHE_NAME
    save_sequence_cache(cache, sequences, vocab)
    with (run_dir / "ingest.tsv").open("w") as fh:
        fh.write("events\tmalformed\tusers\texcluded_users\titems\n")
        fh.write(f"{len(parsed.events)}\t{parsed.malformed}\t{len(sequences)}\t{excluded}\t{vocab.n_items}\n")
    print(f"ingested {len(parsed.events)} events, {len(sequences)} users, {vocab.n_items} items -> {cache}")
    return cache


def load_splits(cfg: RunConfig) -> Splits:
    cache = cfg.run_dir() / CACHE_NAME
    if not cache.exists():
        cmd_ingest(cfg)
    sequences, vocab = load_sequence_cache(cache)
    return prepare_splits(sequences, vocab, cfg.J)


def cmd_train(cfg: RunConfig) -> Path:
    splits = load_splits(cfg)
    model = Recommender(cfg, splits.vocab.n_items, splits.vocab.n_behaviors)
    report = fit(model, splits, cfg, on_epoch=lambda r: print(f"epoch {r.epoch}: loss={r.loss:.5f} {format_metrics('valid', r.valid)}"))
    run_dir = cfg.run_dir()
    report.write_tsv(run_dir / "train_report.tsv")
    path = run_dir / CHECKPOINT_NAME
    digest = checkpoint.save_checkpoint(path, model.state(), cfg.config_hash(), len(report.rows))
    print(f"checkpoint {path} sha256={digest} best_epoch={report.best_epoch}")
    return path


def _load_model(cfg: RunConfig, splits: Splits, path) -> Recommender:
    path = Path(path) if path is not None else cfg.run_dir() / CHECKPOINT_NAME
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    ckpt = checkpoint.load_checkpoint(path)
    if ckpt.config_hash != cfg.config_hash():
        log.warning("checkpoint was written under config %s, current config is %s", ckpt.config_hash[:16], cfg.config_hash()[:16])
    model = Recommender(cfg, splits.vocab.n_items, splits.vocab.n_behaviors)
    model.load_state(ckpt.entries)
    return model


def cmd_eval(cfg: RunConfig, checkpoint_path=None) -> Path:
    splits = load_splits(cfg)
    model = _load_model(cfg, splits, checkpoint_path)
    results = {
        name: evaluate(model, split, splits.vocab, cfg.eval_ns, cfg.n_neg, cfg.seed, cfg.batch_size)
        for name, split in (("valid", splits.valid), ("test", splits.test))
    }
    for name, m in results.items():
        print(format_metrics(name, m))
    return write_metrics(cfg.run_dir() / "metrics.tsv", results)


def cmd_bench(cfg: RunConfig, J: int = 200, repeats: int = 30) -> tuple[Path, Path]:
    run_dir = cfg.run_dir()
    _write_config(cfg)
    Cs = tuple(c for c in (1, 5, 10, 20) if J % c == 0)
    att = bench.benchmark_attention(J=J, d=cfg.d, Cs=Cs, repeats=repeats, seed=cfg.seed)
    hyp = bench.benchmark_hyperconv(Js=tuple(sorted({50, 100, J})), d=cfg.d, k=cfg.k, w0=cfg.w0, repeats=repeats, seed=cfg.seed)
    a, h = att.write_tsv(run_dir / "bench_attention.tsv"), hyp.write_tsv(run_dir / "bench_hyperconv.tsv")
    for row in att.rows:
        print(f"attention {row['method']:8s} C={row['C']:<3d} median {row['median_s'] * 1e3:.3f} ms")
    for row in hyp.rows:
        print(f"hyperconv J={row['J']:<4d} full {row['full_median_s'] * 1e3:.3f} ms "
              f"simplified {row['simplified_median_s'] * 1e3:.3f} ms")
    return a, h


def cmd_inspect(cfg: RunConfig, user: int, checkpoint_path=None) -> dict[str, Path]:
    splits = load_splits(cfg)
    model = _load_model(cfg, splits, checkpoint_path)
    out = cfg.run_dir() / "inspect" / f"user_{user}"
    files = inspection.export_inspection(model, splits.test, splits.vocab, user, out)
    print(f"wrote {len(files)} files to {out}")
    return files


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbseq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data", help="event log path (overrides data_path)")
        p.add_argument("--output-dir", dest="output_dir", help=f"output root (else ${OUTPUT_ENV} or config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field (JSON value)")
        return p

    common(sub.add_parser("ingest", help="parse the event log into a sequence cache"))
    p = common(sub.add_parser("train", help="train and write a checkpoint and report"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--conv-mode", dest="conv_mode", choices=("full", "simplified"))
    for name in ("eval", "inspect"):
        p = common(sub.add_parser(name, help=f"{name} a trained checkpoint"))
        p.add_argument("--checkpoint", help="checkpoint path (default: <run dir>/model.ckpt)")
        if name == "inspect":
            p.add_argument("--user", type=int, required=True, help="raw user id")
    p = common(sub.add_parser("bench", help="attention and hyperconvolution timing tables"))
    p.add_argument("--bench-J", dest="bench_J", type=int, default=200)
    p.add_argument("--repeats", type=int, default=30)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "ingest":
            cmd_ingest(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "bench":
            cmd_bench(cfg, args.bench_J, args.repeats)
        elif args.command == "inspect":
            cmd_inspect(cfg, args.user, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except LookupFailure as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_LOOKUP
    except (SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return 0


if __name__ == "__main__":
    sys.exit(main())
