from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mbseq.data import (
    EVAL,
    PAD,
    TRAIN,
    Event,
    LogSchema,
    NegativeSampler,
    Vocabulary,
    apply_cloze_mask,
    build_sequences,
    collate,
    load_sequence_cache,
    parse_event_log,
    sample_negatives,
    save_sequence_cache,
    split_leave_one_out,
)
from mbseq.errors import ConfigError, SchemaError
from mbseq.synthetic import FOUR_BEHAVIORS, random_log, write_log

SCHEMA = LogSchema(FOUR_BEHAVIORS, "buy")


def events_for(user, items, behaviors, start=0):
    return [Event(user, i, b, start + t) for t, (i, b) in enumerate(zip(items, behaviors))]


def one_sequence(items, behaviors, J=None):
    evs = events_for(1, items, behaviors)
    vocab = Vocabulary.from_events(evs, SCHEMA)
    seqs, _ = build_sequences(evs, vocab, J or len(items), min_targets=0)
    return seqs[1], vocab


class TestParse:
    def test_well_formed_in_timestamp_order(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("1,10,pv,30\n1,11,buy,10\n1,12,fav,20\n")
        parsed = parse_event_log(p, SCHEMA)
        assert [e.timestamp for e in parsed.events] == [10, 20, 30]
        assert parsed.malformed == 0

    def test_malformed_row_counted(self, tmp_path, caplog):
        p = tmp_path / "log.csv"
        p.write_text("1,10,pv,1\n1,oops,pv\n2,11,buy,2\n")
        parsed = parse_event_log(p, SCHEMA)
        assert len(parsed.events) == 2 and parsed.malformed == 1 and parsed.malformed_rows == [2]
        assert "malformed" in caplog.text

    def test_strict_mode_raises(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("1,10,pv,1\n1,x,pv,2\n")
        with pytest.raises(SchemaError):
            parse_event_log(p, SCHEMA, strict=True)

    def test_unknown_behavior_names_row(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("1,10,pv,1\n1,10,like,2\n")
        with pytest.raises(SchemaError, match=":2:"):
            parse_event_log(p, SCHEMA)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_event_log(tmp_path / "none.csv", SCHEMA)

    def test_three_behavior_dataset(self, tmp_path):
        schema = LogSchema(("buy", "cart", "pv"), "buy", delimiter="\t")
        p = tmp_path / "rr.tsv"
        p.write_text("user_id\titem_id\tbehavior\ttimestamp\n1\t5\tpv\t1\n1\t5\tcart\t2\n1\t5\tbuy\t3\n")
        parsed = parse_event_log(p, schema)
        assert {e.behavior for e in parsed.events} == {"buy", "cart", "pv"}

    def test_schema_requires_declared_target(self):
        with pytest.raises(ConfigError):
            LogSchema(("pv", "cart"), "buy")

    def test_round_trip_through_writer(self, tmp_path):
        events, schema = random_log(n_users=5, seed=3)
        parsed = parse_event_log(write_log(tmp_path / "l.csv", events), schema)
        assert parsed.events == sorted(events, key=lambda e: (e.user_id, e.timestamp))

    def test_input_file_untouched(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("1,10,pv,1\n")
        before = p.read_bytes()
        parse_event_log(p, SCHEMA)
        assert p.read_bytes() == before


class TestBuildSequences:
    def test_front_padding(self):
        seq, _ = one_sequence([1, 2, 3, 4, 5], ["pv", "buy", "pv", "buy", "pv"], J=8)
        np.testing.assert_array_equal(seq.items[:3], PAD)
        assert np.all(seq.items[3:] != PAD)
        np.testing.assert_array_equal(seq.attention_mask, [False] * 3 + [True] * 5)

    def test_truncates_to_most_recent(self):
        items = list(range(1, 13))
        seq, vocab = one_sequence(items, ["buy"] * 12, J=8)
        assert [vocab.raw_item(t) for t in seq.items] == items[-8:]

    def test_excludes_users_with_one_target(self):
        evs = events_for(1, [1, 2], ["pv", "buy"]) + events_for(2, [1, 2], ["buy", "buy"])
        vocab = Vocabulary.from_events(evs, SCHEMA)
        seqs, excluded = build_sequences(evs, vocab, 4)
        assert set(seqs) == {2} and excluded == 1

    def test_rejects_tiny_window(self):
        evs = events_for(1, [1, 2], ["buy", "buy"])
        with pytest.raises(ConfigError):
            build_sequences(evs, Vocabulary.from_events(evs, SCHEMA), 1)

    def test_lengths_match_recount(self):
        events, schema = random_log(n_users=30, seed=5)
        vocab = Vocabulary.from_events(events, schema)
        J = 12
        seqs, excluded = build_sequences(events, vocab, J, min_targets=0)
        counts = Counter(e.user_id for e in events)
        assert excluded == 0
        for user, seq in seqs.items():
            assert int(seq.attention_mask.sum()) == min(counts[user], J)
            real = seq.attention_mask
            # padding is a prefix and timestamps never decrease
            assert not np.any(real[:-1] & ~real[1:])
            assert np.all(np.diff(seq.timestamps[real]) >= 0)


class TestClozeMask:
    BEHAVIORS = ["pv", "buy", "cart", "buy"]

    def test_train_masks_every_target(self):
        seq, vocab = one_sequence([1, 2, 3, 4], self.BEHAVIORS)
        masked = apply_cloze_mask(seq, vocab, TRAIN)
        np.testing.assert_array_equal(masked.masked_positions, [1, 3])
        np.testing.assert_array_equal(masked.items[[1, 3]], vocab.item_mask)
        np.testing.assert_array_equal(masked.behaviors[[1, 3]], vocab.behavior_mask)
        np.testing.assert_array_equal(masked.labels[[1, 3]], seq.items[[1, 3]])

    def test_eval_masks_last_target_only(self):
        seq, vocab = one_sequence([1, 2, 3, 4], self.BEHAVIORS)
        masked = apply_cloze_mask(seq, vocab, EVAL)
        np.testing.assert_array_equal(masked.masked_positions, [3])
        np.testing.assert_array_equal(masked.items[:3], seq.items[:3])

    def test_all_target_sequence(self):
        seq, vocab = one_sequence([3, 1, 2], ["buy"] * 3)
        masked = apply_cloze_mask(seq, vocab, TRAIN)
        np.testing.assert_array_equal(masked.labels, seq.items)
        np.testing.assert_array_equal(masked.items, vocab.item_mask)

    def test_no_target_signals_skip(self):
        seq, vocab = one_sequence([1, 2], ["pv", "cart"])
        assert apply_cloze_mask(seq, vocab, TRAIN) is None

    def test_bad_mode(self):
        seq, vocab = one_sequence([1, 2], ["pv", "buy"])
        with pytest.raises(ValueError):
            apply_cloze_mask(seq, vocab, "test")

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(FOUR_BEHAVIORS), min_size=1, max_size=12), st.sampled_from([TRAIN, EVAL]))
    def test_no_label_leakage(self, behaviors, mode):
        seq, vocab = one_sequence(list(range(1, len(behaviors) + 1)), behaviors, J=12)
        masked = apply_cloze_mask(seq, vocab, mode)
        if masked is None:
            assert "buy" not in behaviors
            return
        pos = masked.masked_positions
        assert np.all(masked.items[pos] == vocab.item_mask)
        assert np.all(masked.labels[pos] != vocab.item_mask) and np.all(masked.labels[pos] > 0)
        # the encoder input never carries the held-out item at its own position
        assert not np.any(masked.items[pos] == masked.labels[pos])


class TestNegatives:
    def test_exhaustion_flag(self):
        freq = np.array([0, 5, 3, 2, 0])  # PAD, three items, MASK
        s = sample_negatives(7, truth=1, frequencies=freq, n=100, rng=np.random.default_rng(0))
        assert sorted(s.candidates.tolist()) == [2, 3] and s.exhausted

    def test_excludes_truth_pad_mask(self):
        freq = np.ones(52)
        s = sample_negatives(1, truth=4, frequencies=freq, n=30, rng=np.random.default_rng(0))
        c = s.candidates
        assert len(set(c.tolist())) == 30 and 4 not in c and 0 not in c and 51 not in c and not s.exhausted

    def test_uniform_frequencies_chi_square(self):
        n_items = 20
        freq = np.r_[0, np.ones(n_items), 0]
        sampler = NegativeSampler(freq)
        rng = np.random.default_rng(42)
        counts = np.zeros(n_items + 2)
        draws = 0
        while draws < 100_000:
            picks = sampler.sample(0, truth=0, n=5, rng=rng).candidates
            np.add.at(counts, picks, 1)
            draws += picks.size
        observed = counts[1 : n_items + 1]
        assert stats.chisquare(observed).pvalue > 0.01

    def test_dominant_item_nearly_always_drawn(self):
        freq = np.r_[0, 9900, np.ones(100), 0]
        sampler = NegativeSampler(freq)
        rng = np.random.default_rng(3)
        hits = sum(1 in sampler.sample(0, truth=50, n=1, rng=rng).candidates for _ in range(1000))
        assert hits >= 950

    def test_seeded_reproducibility(self):
        freq = np.r_[0, np.arange(1, 60), 0]
        a = sample_negatives(1, 3, freq, 10, np.random.default_rng(9)).candidates
        b = sample_negatives(1, 3, freq, 10, np.random.default_rng(9)).candidates
        np.testing.assert_array_equal(a, b)


class TestSplit:
    def test_two_targets(self):
        items = [1, 2, 3, 4, 5, 6, 7, 8]
        behaviors = ["pv", "pv", "buy", "pv", "cart", "pv", "buy", "pv"]
        seq, vocab = one_sequence(items, behaviors)
        train, valid, test = split_leave_one_out({1: seq}, vocab)
        assert test[1].labels[test[1].masked_positions[-1]] == vocab.item_token(7)
        assert valid[1].labels[valid[1].masked_positions[-1]] == vocab.item_token(3)
        # later interactions never leak into an earlier split's input
        assert vocab.item_token(8) not in test[1].items and vocab.item_token(4) not in valid[1].items
        assert 1 not in train  # no target before the validation event

    def test_single_target_excluded_upstream(self):
        evs = events_for(1, [1, 2], ["pv", "buy"])
        vocab = Vocabulary.from_events(evs, SCHEMA)
        seqs, excluded = build_sequences(evs, vocab, 4)
        assert excluded == 1 and split_leave_one_out(seqs, vocab) == ({}, {}, {})

    def test_counts_reconcile(self):
        events, schema = random_log(n_users=60, seed=11, target_rate=0.4)
        vocab = Vocabulary.from_events(events, schema)
        seqs, _ = build_sequences(events, vocab, 40)  # every user has at most 30 events
        J = 20
        train, valid, test = split_leave_one_out(seqs, vocab, J=J)
        per_user = defaultdict(list)
        for e in sorted(events, key=lambda e: (e.user_id, e.timestamp)):
            per_user[e.user_id].append(e)
        assert set(test) == set(valid) == set(seqs)
        for user in seqs:
            evs = per_user[user]
            buys = [k for k, e in enumerate(evs) if e.behavior == "buy"]
            last, prev = buys[-1], buys[-2]
            assert test[user].labels[-1] == vocab.item_token(evs[last].item_id)
            assert valid[user].labels[-1] == vocab.item_token(evs[prev].item_id)
            expected = sum(e.behavior == "buy" for e in evs[:prev][-J:])
            got = int(np.count_nonzero(train[user].labels)) if user in train else 0
            assert got == expected
            assert len(test[user].masked_positions) == 1 and len(valid[user].masked_positions) == 1

    def test_deterministic(self):
        events, schema = random_log(n_users=10, seed=2)
        vocab = Vocabulary.from_events(events, schema)
        seqs, _ = build_sequences(events, vocab, 30)
        a, b = split_leave_one_out(seqs, vocab, 10), split_leave_one_out(seqs, vocab, 10)
        for x, y in zip(a, b):
            assert x.keys() == y.keys()
            for u in x:
                np.testing.assert_array_equal(x[u].items, y[u].items)


def test_cache_round_trip(tmp_path):
    events, schema = random_log(n_users=8, seed=4)
    vocab = Vocabulary.from_events(events, schema)
    seqs, _ = build_sequences(events, vocab, 16)
    save_sequence_cache(tmp_path / "c.npz", seqs, vocab)
    seqs2, vocab2 = load_sequence_cache(tmp_path / "c.npz")
    assert seqs2.keys() == seqs.keys() and vocab2.behaviors == vocab.behaviors and vocab2.target == "buy"
    np.testing.assert_array_equal(vocab2.frequencies, vocab.frequencies)
    for u in seqs:
        np.testing.assert_array_equal(seqs2[u].items, seqs[u].items)


def test_collate_stacks():
    seq, vocab = one_sequence([1, 2, 3], ["pv", "buy", "buy"], J=4)
    b = collate([seq, seq])
    assert b.items.shape == (2, 4) and b.size == 2
