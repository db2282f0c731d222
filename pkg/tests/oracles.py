"""Independent reference computations used by several test modules."""

from __future__ import annotations

import itertools

import numpy as np


def ap_threshold_sweep(scores, positives) -> float:
    """Area under the precision-recall step curve, one threshold per distinct score.

    Tied scores enter together, so a constant scorer gets the class prevalence.
    """
    scores = [float(s) for s in scores]
    positives = [bool(p) for p in positives]
    total = sum(positives)
    if total == 0:
        return float("nan")
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        picked = [p for s, p in zip(scores, positives) if s >= t]
        tp = sum(picked)
        recall = tp / total
        area += (tp / len(picked)) * (recall - prev_recall)
        prev_recall = recall
    return area


def all_orderings(n: int, limit: int | None = None, seed: int = 0):
    """Score vectors realising every ranking of ``n`` items (or ``limit`` random ones)."""
    if limit is None:
        for perm in itertools.permutations(range(n)):
            yield np.array(perm, dtype=float)
    else:
        rng = np.random.default_rng(seed)
        for _ in range(limit):
            yield rng.permutation(n).astype(float)


def iou_sets(a: set, b: set) -> float:
    return 1.0 if not (a | b) else len(a & b) / len(a | b)


def oracle_retrieval_bank(spec, n: int, seed: int, pairing_seed: int = 0):
    """Clean bank whose pool split holds an exact sample for every expected set of the test pairs."""
    from laso.labels import apply_set_op
    from laso.metrics import random_pairs
    from laso.synth import concat_banks, generate_bank, render_label_sets

    bank = generate_bank(spec, n, seed=seed, n_pool=0)
    xi, yi = random_pairs(bank.indices("test"), pairing_seed)
    sets = [apply_set_op(op, bank.labels[xi], bank.labels[yi]) for op in ("int", "uni", "sub")]
    return concat_banks(bank, render_label_sets(spec, seed, np.concatenate(sets)))
