import numpy as np
import pytest

from mbseq import bench


def test_attention_table_columns_and_identity_check(tmp_path):
    table = bench.benchmark_attention(J=20, d=8, Cs=(1, 5, 10), repeats=3, batch=2)
    assert [r["method"] for r in table.rows] == ["dense", "lowrank", "lowrank", "lowrank"]
    assert [r["C"] for r in table.rows] == [1, 1, 5, 10]
    assert table.rows[1]["max_abs_diff"] < 1e-10
    header = table.write_tsv(tmp_path / "a.tsv").read_text().splitlines()[0].split("\t")
    assert tuple(header) == bench.ATTENTION_COLUMNS


def test_attention_rejects_indivisible():
    with pytest.raises(ValueError):
        bench.benchmark_attention(J=20, Cs=(3,), repeats=1)


def test_hyperconv_table(tmp_path):
    table = bench.benchmark_hyperconv(Js=(12, 20), d=4, k=3, repeats=2, batch=2)
    for row in table.rows:
        assert row["oracle_max_diff"] < 1e-12
        assert row["constant_max_dev"] < 1e-9
        assert row["speedup"] > 0
    header = table.write_tsv(tmp_path / "h.tsv").read_text().splitlines()[0].split("\t")
    assert tuple(header) == bench.HYPERCONV_COLUMNS


def test_dense_oracle_matches_loop(rng):
    H, wq, wk, wv = rng.normal(size=(5, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    q, k, v = H @ wq, H @ wk, H @ wv
    out = np.zeros_like(v)
    for i in range(5):
        s = np.array([q[i] @ k[j] for j in range(5)]) / np.sqrt(3)
        w = np.exp(s - s.max())
        out[i] = (w / w.sum()) @ v
    np.testing.assert_allclose(bench.dense_attention_oracle(H, wq, wk, wv), out, atol=1e-13)


def test_timer_runs_every_variant():
    calls = {"a": 0, "b": 0}
    times = bench.time_interleaved({n: (lambda n=n: calls.__setitem__(n, calls[n] + 1)) for n in calls}, repeats=4, warmup=1)
    assert calls == {"a": 5, "b": 5} and all(len(t) == 4 for t in times.values())
