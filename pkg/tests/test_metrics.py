import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import all_orderings, ap_threshold_sweep, iou_sets, oracle_retrieval_bank

from laso.autodiff import Tensor
from laso.metrics import (
    analytic_operators,
    average_precision,
    classification_eval,
    pairwise_distances,
    per_class_ap,
    prevalence_baseline,
    random_pairs,
    retrieval_eval,
    unseen_classifier_train,
)
from laso.nets import LinearClassifier
from laso.synth import GeneratorSpec, generate_bank, oracle_classifier_weights, render_label_sets

CLEAN = GeneratorSpec.clean_blocks()


def test_ap_examples():
    assert average_precision([0.9, 0.1, 0.8], [1, 0, 0]) == 1.0
    assert average_precision([0.1, 0.9], [1, 0]) == 0.5
    assert average_precision([0.3, -2.0, 5.0], [1, 1, 1]) == 1.0
    assert np.isnan(average_precision([0.3, 0.2], [0, 0]))


def test_ap_ties_by_ascending_index():
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


@pytest.mark.parametrize("n", range(1, 9))
def test_ap_matches_pr_area_on_all_orderings(n):
    patterns = np.array([p for p in itertools.product([0, 1], repeat=n) if any(p)], dtype=np.uint8).T
    limit = None if n <= 6 else 300
    for scores in all_orderings(n, limit, seed=n):
        s = np.repeat(scores[:, None], patterns.shape[1], axis=1)
        got = per_class_ap(s, patterns)
        expect = [ap_threshold_sweep(scores, patterns[:, j]) for j in range(patterns.shape[1])]
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


@pytest.mark.parametrize("n", range(1, 9))
def test_constant_scorer_pr_area_is_prevalence(n):
    for p in itertools.product([0, 1], repeat=n):
        if any(p):
            assert ap_threshold_sweep(np.zeros(n), p) == pytest.approx(sum(p) / n)


def test_prevalence_baseline_matches_constant_scorer():
    bank = generate_bank(GeneratorSpec(), 120, seed=0)
    for op in ("int", "uni", "sub"):
        from laso.labels import apply_set_op

        xi, yi = random_pairs(bank.indices("test"), 0)
        target = apply_set_op(op, bank.labels[xi], bank.labels[yi])
        cols = [k for k in np.flatnonzero(bank.seen_mask) if target[:, k].any()]
        expect = np.mean([ap_threshold_sweep(np.zeros(len(xi)), target[:, k]) for k in cols])
        assert prevalence_baseline(bank, op, bank.seen_mask, 0) == pytest.approx(expect)


@given(arrays(np.float64, 12, elements=st.floats(-5, 5)), arrays(np.uint8, 12, elements=st.integers(0, 1)))
def test_ap_in_unit_interval_and_permutation_invariant(scores, pos):
    if not pos.any():
        return
    # distinct scores so that sample order cannot matter
    scores = scores + np.arange(12) * 1e-3
    a = average_precision(scores, pos)
    assert 0.0 < a <= 1.0
    perm = np.random.default_rng(0).permutation(12)
    assert average_precision(scores[perm], pos[perm]) == pytest.approx(a)


def test_ap_rejects_nonfinite():
    with pytest.raises(ValueError):
        average_precision([np.nan, 1.0], [1, 0])


def test_random_pairs_drops_one_when_odd():
    a, b = random_pairs(np.arange(7), 0)
    assert len(a) == len(b) == 3
    assert len(set(a) | set(b)) == 6
    a2, b2 = random_pairs(np.arange(7), 0)
    np.testing.assert_array_equal(a, a2)


# oracle chain


@pytest.fixture(scope="module")
def clean_bank():
    return generate_bank(CLEAN, 400, seed=1)


@pytest.fixture(scope="module")
def oracle_clf():
    w, b = oracle_classifier_weights(CLEAN)
    return LinearClassifier(Tensor(w), Tensor(b))


def test_oracle_chain_classification(clean_bank, oracle_clf):
    rep = classification_eval(analytic_operators(2), clean_bank, oracle_clf, oracle_clf)
    for op in ("int", "uni", "sub", "original"):
        assert rep.map(op, "seen") == 1.0
        assert rep.map(op, "unseen") == 1.0


def test_oracle_chain_retrieval_top1():
    bank = oracle_retrieval_bank(CLEAN, 400, seed=2)
    rep = retrieval_eval(analytic_operators(2), bank, ks=(1, 3, 5), pool_splits=("pool",))
    for op in ("int", "uni", "sub"):
        for subset in ("seen", "unseen", "all"):
            assert rep.miou(op, subset, 1) == 1.0


def test_render_label_sets_matches_generator():
    bank = generate_bank(CLEAN, 300, seed=3)
    rendered = render_label_sets(CLEAN, 3, bank.labels)
    np.testing.assert_array_equal(rendered.features, bank.features)
    np.testing.assert_array_equal(rendered.seen_mask, bank.seen_mask)


def test_retrieval_monotone_per_query(clean_bank):
    rep = retrieval_eval(analytic_operators(1), clean_bank, ks=(1, 3, 5))
    for op, subs in rep.per_query.items():
        for res in subs.values():
            assert np.all(np.diff(res, axis=1) >= 0)
            assert np.all((res >= 0) & (res <= 1))


def test_retrieval_k_too_large(clean_bank):
    with pytest.raises(ValueError):
        retrieval_eval(analytic_operators(2), clean_bank, ks=(clean_bank.indices("test").size,))


def test_retrieval_exact_match_scores_one():
    from laso import kernels

    pool_l = np.array([[1, 0, 0], [0, 1, 1], [1, 1, 0]], dtype=np.uint8)
    dist = np.array([[5.0, 0.0, 1.0]])
    out = kernels.topk_max_iou(dist, np.array([[0, 1, 1]]), pool_l, np.array([[-1, -1]]), [1, 3])
    np.testing.assert_array_equal(out, [[1.0, 1.0]])
    # excluding the exact match leaves the next neighbour
    out = kernels.topk_max_iou(dist, np.array([[0, 1, 1]]), pool_l, np.array([[1, 1]]), [1])
    assert out[0, 0] == pytest.approx(iou_sets({1, 2}, {0, 1}))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_topk_iou_matches_brute_force(seed):
    from laso import kernels

    rng = np.random.default_rng(seed)
    nq, npool, L = 4, 9, 5
    dist = rng.integers(0, 4, (nq, npool)).astype(float)  # many ties
    ql = rng.integers(0, 2, (nq, L))
    pl = rng.integers(0, 2, (npool, L))
    ex = rng.integers(0, npool, (nq, 2))
    got = kernels.topk_max_iou(dist, ql, pl, ex, [1, 2, 5])
    for q in range(nq):
        cand = [j for j in range(npool) if j not in set(ex[q])]
        cand.sort(key=lambda j: (dist[q, j], j))
        for col, k in enumerate([1, 2, 5]):
            best = max(iou_sets(set(np.flatnonzero(ql[q])), set(np.flatnonzero(pl[j]))) for j in cand[:k])
            assert got[q, col] == pytest.approx(best)


def test_pairwise_distances():
    q = np.array([[0.0, 0.0], [1.0, 1.0]])
    p = np.array([[3.0, 4.0], [1.0, 1.0]])
    np.testing.assert_allclose(pairwise_distances(q, p), [[25.0, 2.0], [13.0, 0.0]])
    np.testing.assert_allclose(pairwise_distances(q[1:], p, "cosine"), [[1 - 7 / (5 * np.sqrt(2)), 0.0]], atol=1e-12)
    with pytest.raises(ValueError):
        pairwise_distances(q, p, "manhattan")


# unseen-label classifier


def test_unseen_classifier_on_clean_bank():
    bank = generate_bank(CLEAN, 2000, seed=4)
    c = unseen_classifier_train(bank, seed=0)
    test = bank.indices("test")
    aps = per_class_ap(bank.features64(test) @ c.weight.data.T + c.bias.data, bank.labels[test])
    unseen = aps[bank.unseen_mask]
    assert np.nanmean(unseen) >= 0.99
    c2 = unseen_classifier_train(bank, seed=0)
    np.testing.assert_array_equal(c.weight.data, c2.weight.data)


def test_unseen_classifier_empty_pool():
    bank = generate_bank(CLEAN, 40, seed=0, n_pool=0)
    with pytest.raises(ValueError, match="pool"):
        unseen_classifier_train(bank)


def test_report_serialisation(clean_bank, oracle_clf):
    rep = classification_eval(analytic_operators(2), clean_bank, oracle_clf)
    table = rep.table_csv().splitlines()
    assert table[0] == "operation,map_seen"
    assert [r.split(",")[0] for r in table[1:]] == ["int", "uni", "sub", "original"]
    doc = rep.to_json()
    assert doc["ops"]["uni"]["seen"]["map"] == 1.0
