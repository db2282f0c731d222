"""Classification (mAP) and retrieval (top-k max IoU) evaluation of synthesized vectors."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from laso import kernels
from laso.labels import apply_set_op
from laso.nets import OPS, AnalyticOperator, LasoModel, LinearClassifier, classify
from laso.synth import FeatureBank
from laso.training import fit_linear_classifier

logger = logging.getLogger(__name__)

Operator = Callable[[np.ndarray, np.ndarray], np.ndarray]


def average_precision(scores, positives) -> float:
    """Average precision of one ranking; NaN when there are no positives.

    Rank by descending score, ties by ascending index, and average
    precision@r over the ranks r holding a positive.
    """
    return float(kernels.average_precision_columns(np.asarray(scores, float)[:, None], np.asarray(positives)[:, None])[0])


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return kernels.average_precision_columns(scores, labels)


def learned_operators(model: LasoModel) -> dict[str, Operator]:
    return {kind: (lambda fx, fy, k=kind: model.apply(k, fx, fy)) for kind in OPS}


def analytic_operators(variant: int = 2) -> dict[str, Operator]:
    return {kind: (lambda fx, fy, k=kind: AnalyticOperator(k, variant)(fx, fy).data) for kind in OPS}


def unseen_classifier_train(
    bank: FeatureBank,
    unseen_mask: Optional[np.ndarray] = None,
    split: str = "pool",
    epochs: int = 50,
    lr: float = 3e-3,
    seed=0,
) -> LinearClassifier:
    """Linear classifier trained with BCE on the unseen labels of a reserved pool.

    The pool never contains synthesized vectors and is disjoint from the
    operator-training split.
    """
    mask = bank.unseen_mask if unseen_mask is None else np.asarray(unseen_mask, bool)
    idx = bank.indices(split)
    if len(idx) == 0:
        raise ValueError(f"no samples in split {split!r} to train the unseen-label classifier")
    return fit_linear_classifier(
        bank.features64(idx), bank.labels[idx], mask.astype(float), epochs=epochs, lr=lr, seed=seed
    )


def random_pairs(indices: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random perfect matching of ``indices``; one sample is dropped when the count is odd."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(indices)
    if len(perm) % 2:
        logger.info("odd number of samples (%d); dropping index %d from the pairing", len(perm), perm[-1])
        perm = perm[:-1]
    return perm[0::2], perm[1::2]


@dataclass
class SubsetScore:
    map: float
    per_class: dict  # label index -> AP
    skipped: list  # labels in the subset with no positives


@dataclass
class EvalReport:
    """Per-operation classification results; keys of ``ops`` are int/uni/sub/original."""

    ops: dict = field(default_factory=dict)  # op -> {"seen": SubsetScore, "unseen": SubsetScore}
    n_pairs: int = 0

    def map(self, op: str, subset: str) -> float:
        return self.ops[op][subset].map

    def to_json(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "ops": {
                op: {
                    sub: {"map": _jf(s.map), "per_class": {str(k): _jf(v) for k, v in s.per_class.items()}, "skipped": s.skipped}
                    for sub, s in subs.items()
                }
                for op, subs in self.ops.items()
            },
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["operation", "subset", "label", "ap"])
        for op, subs in self.ops.items():
            for sub, s in subs.items():
                for k, v in sorted(s.per_class.items()):
                    w.writerow([op, sub, k, _fmt(v)])
                for k in s.skipped:
                    w.writerow([op, sub, k, "skipped"])
        return buf.getvalue()

    def table_csv(self) -> str:
        """mAP summary, one row per operation and one column per subset."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        subsets = sorted({sub for subs in self.ops.values() for sub in subs})
        w.writerow(["operation"] + [f"map_{s}" for s in subsets])
        for op, subs in self.ops.items():
            w.writerow([op] + [_fmt(subs[s].map) if s in subs else "" for s in subsets])
        return buf.getvalue()


def _jf(x: float):
    return None if x is None or not np.isfinite(x) else float(x)


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def _subset_score(scores: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> SubsetScore:
    cols = np.flatnonzero(mask)
    aps = per_class_ap(scores[:, cols], targets[:, cols])
    per_class = {int(c): float(a) for c, a in zip(cols, aps) if np.isfinite(a)}
    skipped = [int(c) for c, a in zip(cols, aps) if not np.isfinite(a)]
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return SubsetScore(mean, per_class, skipped)


def classification_eval(
    operators: Mapping[str, Operator],
    bank: FeatureBank,
    seen_classifier: LinearClassifier,
    unseen_classifier: Optional[LinearClassifier] = None,
    pairing_seed=0,
    split: str = "test",
) -> EvalReport:
    """Score synthesized vectors of randomly paired samples against the expected label sets.

    The seen classifier is evaluated on seen labels and the unseen one (if
    given) on unseen labels. The ``original`` entry scores the unmodified
    features of the paired samples against their own labels.
    """
    idx = bank.indices(split)
    if len(idx) < 2:
        raise ValueError(f"split {split!r} has fewer than two samples")
    xi, yi = random_pairs(idx, pairing_seed)
    fx, fy = bank.features64(xi), bank.features64(yi)
    lx, ly = bank.labels[xi], bank.labels[yi]
    subsets = [("seen", seen_classifier, bank.seen_mask)]
    if unseen_classifier is not None:
        subsets.append(("unseen", unseen_classifier, bank.unseen_mask))

    report = EvalReport(n_pairs=len(xi))
    for op, fn in operators.items():
        z = fn(fx, fy)
        target = apply_set_op(op, lx, ly)
        report.ops[op] = {name: _subset_score(classify(c, z), target, m) for name, c, m in subsets}
    paired = np.concatenate([xi, yi])
    f0, l0 = bank.features64(paired), bank.labels[paired]
    report.ops["original"] = {name: _subset_score(classify(c, f0), l0, m) for name, c, m in subsets}
    return report


def prevalence_baseline(bank: FeatureBank, op: str, mask: np.ndarray, pairing_seed=0, split: str = "test") -> float:
    """mAP of a scorer that gives every pair the same score: the mean positive rate per class."""
    xi, yi = random_pairs(bank.indices(split), pairing_seed)
    target = apply_set_op(op, bank.labels[xi], bank.labels[yi]) if op != "original" else bank.labels[np.concatenate([xi, yi])]
    rates = [target[:, k].mean() for k in np.flatnonzero(mask) if target[:, k].any()]
    return float(np.mean(rates)) if rates else float("nan")


# ---------------------------------------------------------------- retrieval


@dataclass
class RetrievalReport:
    """Mean top-k max IoU per operation and label subset: ``values[op][subset][k]``."""

    ks: tuple = (1, 3, 5)
    values: dict = field(default_factory=dict)
    n_queries: dict = field(default_factory=dict)
    per_query: dict = field(default_factory=dict, repr=False)

    def miou(self, op: str, subset: str, k: int) -> float:
        return self.values[op][subset][k]

    def to_json(self) -> dict:
        return {
            "ks": list(self.ks),
            "n_queries": self.n_queries,
            "values": {op: {s: {str(k): _jf(v) for k, v in ks.items()} for s, ks in subs.items()} for op, subs in self.values.items()},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["operation", "subset"] + [f"top{k}" for k in self.ks])
        for op, subs in self.values.items():
            for s, ks in subs.items():
                w.writerow([op, s] + [_fmt(ks[k]) for k in self.ks])
        return buf.getvalue()


def pairwise_distances(queries: np.ndarray, pool: np.ndarray, metric: str = "sqeuclidean", chunk: int = 128) -> np.ndarray:
    """Distances computed directly from differences (no norm-expansion cancellation)."""
    q = np.asarray(queries, float)
    p = np.asarray(pool, float)
    if metric == "sqeuclidean":
        out = np.empty((len(q), len(p)))
        for s in range(0, len(q), chunk):
            diff = q[s : s + chunk, None, :] - p[None, :, :]
            out[s : s + chunk] = np.einsum("qpd,qpd->qp", diff, diff)
        return out
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        pn = np.linalg.norm(p, axis=1, keepdims=True)
        sim = (q / np.where(qn > 0, qn, 1.0)) @ (p / np.where(pn > 0, pn, 1.0)).T
        return 1.0 - sim
    raise ValueError(f"unknown metric {metric!r}; use 'sqeuclidean' or 'cosine'")


def retrieval_eval(
    operators: Mapping[str, Operator],
    bank: FeatureBank,
    ks: Sequence[int] = (1, 3, 5),
    pairing_seed=0,
    split: str = "test",
    metric: str = "sqeuclidean",
    include_original: bool = True,
    pool_splits: Optional[Sequence[str]] = None,
) -> RetrievalReport:
    """Nearest-neighbour check of synthesized vectors against the split's real samples.

    For every pair and operation the two source samples are removed from
    the pool; the score for k is the best label-set IoU among the k nearest
    remaining samples, averaged over queries, separately on seen and unseen
    labels. Queries are pairs from ``split``; the pool is ``split`` plus any
    ``pool_splits``.
    """
    ks = tuple(int(k) for k in ks)
    idx = bank.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    extra = [s for s in (pool_splits or ()) if s != split]
    pool_idx = np.concatenate([idx] + [bank.indices(s) for s in extra])
    if max(ks) > len(pool_idx) - 2:
        raise ValueError(f"k={max(ks)} exceeds the retrieval pool ({len(pool_idx)} samples, 2 excluded per query)")
    pos = {int(g): i for i, g in enumerate(pool_idx)}
    pool_f = bank.features64(pool_idx)
    pool_l = bank.labels[pool_idx]
    xi, yi = random_pairs(idx, pairing_seed)
    exclude = np.stack([[pos[int(a)] for a in xi], [pos[int(b)] for b in yi]], axis=1)
    fx, fy = bank.features64(xi), bank.features64(yi)
    lx, ly = bank.labels[xi], bank.labels[yi]

    queries = {op: (fn(fx, fy), apply_set_op(op, lx, ly), exclude) for op, fn in operators.items()}
    if include_original:
        self_idx = np.array([pos[int(i)] for i in idx])
        queries["original"] = (bank.features64(idx), bank.labels[idx], np.stack([self_idx, self_idx], axis=1))

    report = RetrievalReport(ks=ks)
    for op, (z, target, ex) in queries.items():
        dist = pairwise_distances(z, pool_f, metric)
        report.values[op] = {}
        report.per_query[op] = {}
        report.n_queries[op] = len(z)
        for subset, mask in (("seen", bank.seen_mask), ("unseen", bank.unseen_mask), ("all", np.ones(bank.n_labels, bool))):
            res = kernels.topk_max_iou(dist, target * mask, pool_l * mask, ex, ks)
            report.per_query[op][subset] = res
            report.values[op][subset] = {k: float(res[:, j].mean()) for j, k in enumerate(ks)}
    return report


def write_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
