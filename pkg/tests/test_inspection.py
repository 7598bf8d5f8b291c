import numpy as np
import pytest

from mbseq.errors import LookupFailure
from mbseq.inspection import export_inspection, read_matrix, write_matrix
from mbseq.model import Recommender
from mbseq.synthetic import random_log
from mbseq.train import prepare

from conftest import toy_config


@pytest.fixture
def exported(tmp_path):
    cfg = toy_config(J=8, d=8)
    events, schema = random_log(n_users=6, n_items=5, length=(8, 14), seed=2)
    splits = prepare(events, schema, cfg.J)
    model = Recommender(cfg, splits.vocab.n_items, splits.vocab.n_behaviors)
    user = sorted(splits.test)[0]
    return export_inspection(model, splits.test, splits.vocab, user, tmp_path), model, splits, user


def test_attention_rows_sum_to_one(exported):
    files = exported[0]
    attention = [name for name in files if name.startswith("attention_")]
    assert any("lowrank" in n for n in attention) and any("scale" in n for n in attention)
    for name in attention:
        values, _, _ = read_matrix(files[name])
        np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-6)


def test_alpha_pairs(exported):
    lines = exported[0]["alpha"].read_text().splitlines()
    assert lines[0] == "position\tlabel\talpha_sequential\talpha_hypergraph"
    for line in lines[1:]:
        a, b = (float(v) for v in line.split("\t")[2:])
        assert abs(a + b - 1) < 1e-12


def test_gram_matches_incidence(exported):
    files = exported[0]
    M, rows, cols = read_matrix(files["incidence"])
    G, _, _ = read_matrix(files["incidence_gram"])
    np.testing.assert_allclose(G, M @ M.T, rtol=0, atol=1e-14)
    assert all(c.split(":")[0] in ("semantic", "behavior") for c in cols)
    masked = [i for i, r in enumerate(rows) if r.endswith((":mask", ":pad"))]
    assert masked and np.all(M[masked] == 0)


def test_simplified_operator_export(exported):
    Mp, rows, cols = read_matrix(exported[0]["simplified_operator"])
    assert Mp.shape == (8, 8) and rows == cols
    np.testing.assert_allclose(Mp, Mp.T, rtol=0, atol=1e-15)


def test_unknown_user(exported, tmp_path):
    _, model, splits, _ = exported
    with pytest.raises(LookupFailure):
        export_inspection(model, splits.test, splits.vocab, 10_000, tmp_path / "x")


def test_matrix_round_trip(tmp_path, rng):
    X = rng.normal(size=(3, 4))
    values, rows, cols = read_matrix(write_matrix(tmp_path / "m.tsv", X, ["a", "b", "c"]))
    np.testing.assert_array_equal(values, X)
    assert rows == ["a", "b", "c"] and cols == ["0", "1", "2", "3"]
