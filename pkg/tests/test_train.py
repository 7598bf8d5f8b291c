import numpy as np
import pytest

from mbseq import checkpoint
from mbseq.data import collate
from mbseq.errors import TrainingError
from mbseq.model import Recommender
from mbseq.synthetic import planted_chains, random_log
from mbseq.train import (
    evaluate, fit, make_optimizer, metrics_from_ranks, prepare, rank_of_truth, train_epoch, write_metrics,
)

from conftest import planted_config, toy_config


def small_setup(**changes):
    cfg = toy_config(J=8, d=8, **changes)
    events, schema = random_log(n_users=12, n_items=15, length=(6, 14), seed=3)
    splits = prepare(events, schema, cfg.J)
    return cfg, splits, Recommender(cfg, splits.vocab.n_items, splits.vocab.n_behaviors)


class TestMetrics:
    def test_rank_one(self):
        m = metrics_from_ranks([1])
        assert m.hr == {5: 1.0, 10: 1.0} and m.ndcg == {5: 1.0, 10: 1.0} and m.mrr == 1.0

    def test_rank_four(self):
        m = metrics_from_ranks([4])
        assert m.hr[5] == 1.0 and m.ndcg[5] == 1 / np.log2(5) and m.mrr == 0.25

    def test_rank_twelve(self):
        m = metrics_from_ranks([12])
        assert m.hr[10] == 0.0 and m.ndcg[10] == 0.0 and m.mrr == 1 / 12

    def test_invariants(self, rng):
        m = metrics_from_ranks(rng.integers(1, 102, size=500), ns=(1, 5, 10, 50))
        hrs = [m.hr[n] for n in (1, 5, 10, 50)]
        assert hrs == sorted(hrs)
        assert all(0 <= m.ndcg[n] <= m.hr[n] <= 1 for n in m.hr)

    def test_rank_ties_by_item_id(self):
        assert rank_of_truth(1.0, 5, np.array([1.0, 1.0, 0.5]), np.array([3, 9, 2])) == 2
        assert rank_of_truth(1.0, 2, np.array([1.0, 1.0]), np.array([3, 9])) == 1

    def test_rank_oracle(self, rng):
        for _ in range(50):
            scores = rng.integers(0, 4, size=11).astype(float)
            ids = rng.permutation(np.arange(1, 12))
            order = sorted(range(11), key=lambda i: (-scores[i], ids[i]))
            assert rank_of_truth(scores[0], ids[0], scores[1:], ids[1:]) == order.index(0) + 1


def test_random_scorer_hit_rate():
    events, schema = random_log(n_users=2300, n_items=300, length=(6, 12), seed=5, target_rate=0.5)
    splits = prepare(events, schema, 12)
    assert len(splits.test) >= 2000
    rng = np.random.default_rng(0)
    m = evaluate(lambda b: rng.random((b.size, splits.vocab.n_items)), splits.test, splits.vocab, n_neg=100, seed=0, batch_size=256)
    assert abs(m.hr[5] - 5 / 101) <= 0.01


class TestTraining:
    def test_zero_learning_rate_keeps_parameters(self):
        cfg, splits, model = small_setup(lr=0.0)
        before = checkpoint.entries_digest(model.state())
        train_epoch(model, splits.train, make_optimizer(model, cfg), 4, np.random.default_rng(0))
        assert checkpoint.entries_digest(model.state()) == before

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            cfg, splits, model = small_setup(epochs=3, lr=0.01, dropout=0.1)
            report = fit(model, splits, cfg)
            runs.append((report.losses, [r.valid.as_row() for r in report.rows], checkpoint.entries_digest(model.state())))
        assert runs[0] == runs[1]

    def test_evaluate_does_not_touch_parameters(self):
        cfg, splits, model = small_setup()
        before = checkpoint.entries_digest(model.state())
        evaluate(model, splits.test, splits.vocab)
        assert checkpoint.entries_digest(model.state()) == before
        assert all(p.grad is None for p in model.params.values())

    def test_negatives_independent_of_model(self):
        cfg, splits, _ = small_setup()
        seen = []

        def recorder(batch):
            seen.append(batch.items.copy())
            return np.zeros((batch.size, splits.vocab.n_items))

        a = evaluate(recorder, splits.test, splits.vocab, seed=4)
        b = evaluate(recorder, splits.test, splits.vocab, seed=4)
        assert a == b

    def test_non_finite_loss_names_batch(self):
        cfg, splits, model = small_setup()
        model.params["item_emb"].data[:] = np.nan
        with pytest.raises(TrainingError, match="batch 0"):
            train_epoch(model, splits.train, make_optimizer(model, cfg), 4, np.random.default_rng(0))

    def test_report_tsv(self, tmp_path):
        cfg, splits, model = small_setup(epochs=2)
        report = fit(model, splits, cfg)
        lines = report.write_tsv(tmp_path / "r.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["epoch", "loss", "seconds", "valid_users", "valid_hr@5", "valid_ndcg@5",
                                        "valid_hr@10", "valid_ndcg@10", "valid_mrr", "best"]
        assert [int(line.split("\t")[0]) for line in lines[1:]] == [0, 1]

    def test_metrics_tsv(self, tmp_path):
        m = metrics_from_ranks([1, 3])
        lines = write_metrics(tmp_path / "m.tsv", {"valid": m, "test": m}).read_text().splitlines()
        assert lines[0] == "split\tusers\thr@5\tndcg@5\thr@10\tndcg@10\tmrr"
        assert lines[1].split("\t")[:2] == ["valid", "2"]


@pytest.mark.slow
def test_planted_corpus_loss_drops():
    cfg = planted_config()
    events, schema = planted_chains(n_users=50, n_items=30, seed=0)
    splits = prepare(events, schema, cfg.J)
    model = Recommender(cfg, splits.vocab.n_items, splits.vocab.n_behaviors)
    optimizer, rng = make_optimizer(model, cfg), np.random.default_rng(cfg.seed)
    losses = [train_epoch(model, splits.train, optimizer, cfg.batch_size, rng, e).loss for e in range(21)]
    assert losses[20] <= 0.1 * losses[0], losses
