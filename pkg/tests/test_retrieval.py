import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmvit.retrieval import (DescriptorIndex, MetricsReport, average_precision, classification_metrics,
                             evaluate_retrieval, micro_macro, pr_f1_ndcg, rank, rank_ids, similarity_matrix,
                             write_metrics, write_similarity_csv)

from oracles import brute_metrics, brute_rank


def random_index(seed, Q=60, C=4, d=3, backend="exhaustive", quantize=False):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(Q, d))
    if quantize:
        X = np.round(X * 2) / 2  # many exact distance ties
    labels = np.arange(Q) % C
    ids = [f"s{k:03d}" for k in rng.permutation(Q)]
    return DescriptorIndex(X, labels, ids, backend)


# ----------------------------------------------------------- classification
def test_classification_all_correct():
    logits = np.eye(4)[[0, 1, 2, 3, 1]]
    r = classification_metrics(logits, [0, 1, 2, 3, 1])
    assert r.oa == r.ma == 1.0


def test_classification_hand_case():
    logits = np.zeros((40, 2))
    logits[:, 0] = 1.0
    labels = np.array([0] * 10 + [1] * 30)
    r = classification_metrics(logits, labels)
    assert r.oa == 0.25 and r.ma == 0.5 and r.per_class == [1.0, 0.0]


def test_classification_matches_scan_and_ties_low_index():
    rng = np.random.default_rng(0)
    logits = rng.integers(0, 3, size=(200, 5)).astype(float)  # plenty of ties
    labels = rng.integers(0, 5, 200)
    r = classification_metrics(logits, labels)
    pred = []
    for row in logits:
        best = 0
        for c in range(5):
            if row[c] > row[best]:
                best = c
        pred.append(best)
    ok = [p == y for p, y in zip(pred, labels)]
    assert r.oa == pytest.approx(sum(ok) / 200, abs=1e-15)
    per = [np.mean([o for o, y in zip(ok, labels) if y == c]) for c in range(5)]
    assert r.ma == pytest.approx(np.mean(per), abs=1e-15)


def test_classification_missing_class_warns_and_empty_errors():
    with pytest.warns(UserWarning):
        r = classification_metrics(np.eye(3)[[0, 0]], [0, 0])
    assert r.ma == 1.0 and math.isnan(r.per_class[2])
    with pytest.raises(ValueError):
        classification_metrics(np.zeros((0, 3)), [])


# -------------------------------------------------------------------- rank
def test_two_entry_index():
    idx = DescriptorIndex(np.array([[0.0], [1.0]]), [0, 1], ["a", "b"])
    assert rank_ids("a", idx) == ["b"] and rank_ids("b", idx) == ["a"]


def test_unknown_query():
    with pytest.raises(KeyError):
        rank("zzz", random_index(0))


@pytest.mark.parametrize("quantize", [False, True])
def test_rank_matches_brute_force(quantize):
    idx = random_index(1, quantize=quantize)
    for q in range(60):
        got = list(rank(idx.ids[q], idx, cap=20))
        assert got == brute_rank(idx.descriptors, idx.ids, q, 20)
        assert q not in got


@pytest.mark.parametrize("quantize", [False, True])
@pytest.mark.parametrize("cap", [1, 7, 1000])
def test_kdtree_equals_exhaustive(quantize, cap):
    ex = random_index(2, Q=200, d=4, quantize=quantize)
    kd = ex.with_backend("kd-tree")
    for qid in ex.ids:
        assert list(rank(qid, kd, cap)) == list(rank(qid, ex, cap))


def test_cosine_distance_orders_by_angle():
    X = np.array([[1.0, 0.0], [10.0, 1.0], [0.0, 0.5], [-1.0, 0.0]])
    idx = DescriptorIndex(X, [0, 0, 1, 1], ["a", "b", "c", "d"], distance="cosine")
    assert rank_ids("a", idx) == ["b", "c", "d"]


def test_index_validation():
    with pytest.raises(ValueError):
        DescriptorIndex(np.zeros((2, 2)), [0], ["a", "b"])
    with pytest.raises(ValueError):
        DescriptorIndex(np.array([[np.nan, 0.0]]), [0], ["a"])
    with pytest.raises(ValueError):
        DescriptorIndex(np.zeros((2, 2)), [0, 1], ["a", "a"])


# ----------------------------------------------------------------- metrics
def test_ap_hand_cases():
    assert average_precision([1, 1, 1]) == 1.0
    assert average_precision([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    with pytest.warns(UserWarning):
        assert average_precision([0, 0]) == 0.0


def test_prf_ndcg_hand_cases():
    assert pr_f1_ndcg([1, 1, 0], 2, 2) == (1.0, 1.0, 1.0, 1.0)
    assert pr_f1_ndcg([0, 0, 1], 2, 1) == (0.0, 0.0, 0.0, 0.0)
    p, r, f1, ndcg = pr_f1_ndcg([0, 1], 2, 1)
    assert (p, r) == (0.5, 1.0) and f1 == pytest.approx(2 / 3)
    assert ndcg == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg == pytest.approx(0.6309297535714575, abs=1e-12)


def test_micro_macro_hand_cases():
    assert micro_macro([0.3, 0.5], [1, 1]) == pytest.approx((0.4, 0.4))
    assert micro_macro([1.0, 0.0, 0.0, 0.0], [0, 1, 1, 1]) == pytest.approx((0.25, 0.5))


@pytest.mark.parametrize("cap", [5, 1000])
def test_retrieval_report_matches_brute_force(cap):
    idx = random_index(3, Q=60, C=5)
    rep = evaluate_retrieval(idx, cap=cap)
    ref = brute_metrics(idx.descriptors.tolist(), idx.labels.tolist(), idx.ids, cap)
    got = {"ap_micro": rep.map_micro, "ap_macro": rep.map_macro}
    for k in ("p", "r", "f1", "ndcg"):
        got[k + "_micro"] = getattr(rep, k + "_micro")
        got[k + "_macro"] = getattr(rep, k + "_macro")
    for k, v in ref.items():
        assert got[k] == pytest.approx(v, abs=1e-10), k


def test_perfect_clusters_give_unit_metrics():
    X = np.repeat(np.eye(4) * 10, 5, axis=0) + np.random.default_rng(0).normal(size=(20, 4)) * 0.01
    idx = DescriptorIndex(X, np.repeat(np.arange(4), 5), [f"q{i}" for i in range(20)])
    rep = evaluate_retrieval(idx)
    for k in ("map_micro", "p_macro", "r_micro", "f1_micro", "ndcg_macro"):
        assert getattr(rep, k) == pytest.approx(1.0)


def test_random_descriptors_map_near_prior():
    rng = np.random.default_rng(11)
    Q, C = 400, 8
    idx = DescriptorIndex(rng.normal(size=(Q, 16)), np.arange(Q) % C, [f"r{i}" for i in range(Q)])
    rep = evaluate_retrieval(idx)
    assert abs(rep.map_micro - 1 / C) <= 0.05


def test_metrics_invariant_to_index_permutation():
    idx = random_index(4, Q=50, C=5)
    p = np.random.default_rng(0).permutation(50)
    idx2 = DescriptorIndex(idx.descriptors[p], idx.labels[p], [idx.ids[i] for i in p])
    a, b = evaluate_retrieval(idx), evaluate_retrieval(idx2)
    for k in ("map_micro", "map_macro", "p_micro", "ndcg_macro", "f1_macro"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_metrics_in_unit_interval(seed, cap):
    rep = evaluate_retrieval(random_index(seed, Q=24, C=3, quantize=seed % 2 == 0), cap=cap)
    for k, v in vars(rep).items():
        if k not in ("cap", "per_query"):
            assert 0.0 <= v <= 1.0 + 1e-12


# -------------------------------------------------------------- similarity
def test_similarity_matrix(tmp_path):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(6, 3))
    X[4] = 0
    idx = DescriptorIndex(X, [0] * 6, [f"x{i}" for i in range(6)])
    S, zero = similarity_matrix(idx)
    assert zero.tolist() == [False] * 4 + [True, False]
    assert np.abs(S - S.T).max() <= 1e-12
    np.testing.assert_array_equal(np.diag(S), [1, 1, 1, 1, 0, 1])
    for i in range(6):
        for j in range(6):
            if i == j:
                continue
            a, b = X[i], X[j]
            na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
            ref = 0.0 if na == 0 or nb == 0 else float(a @ b) / (na * nb)
            assert S[i, j] == pytest.approx(ref, abs=1e-12)
    path = write_similarity_csv(tmp_path / "sim.csv", S, idx.ids)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["id"] + idx.ids and rows[3][0] == "x2"
    assert float(rows[1][2]) == S[0, 1]


def test_write_metrics(tmp_path):
    logits = np.eye(3)[[0, 1, 2, 0]]
    idx = random_index(6, Q=12, C=3)
    rep = MetricsReport(classification_metrics(logits, [0, 1, 2, 1]), evaluate_retrieval(idx))
    j, c = write_metrics(rep, tmp_path)
    doc = json.loads(j.read_text())
    assert doc["classification"]["oa"] == 0.75
    rows = dict(list(csv.reader(c.open()))[1:])
    assert float(rows["map_micro"]) == rep.retrieval.map_micro and "ndcg_macro" in rows
