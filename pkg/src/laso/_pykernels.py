"""Numpy implementations of the ranking kernels (fallback for _ckernels)."""

from __future__ import annotations

import numpy as np


def average_precision_columns(scores: np.ndarray, positives: np.ndarray) -> np.ndarray:
    n, k = scores.shape
    # stable sort on negated scores: descending score, ascending row on ties
    order = np.argsort(-scores, axis=0, kind="stable")
    pos = np.take_along_axis(positives.astype(bool), order, axis=0)
    hits = np.cumsum(pos, axis=0)
    prec = hits / np.arange(1, n + 1)[:, None]
    total = pos.sum(axis=0)
    out = np.full(k, np.nan)
    ok = total > 0
    out[ok] = np.where(pos, prec, 0.0).sum(axis=0)[ok] / total[ok]
    return out


def topk_max_iou(
    dist: np.ndarray,
    query_labels: np.ndarray,
    pool_labels: np.ndarray,
    exclude: np.ndarray,
    ks: np.ndarray,
) -> np.ndarray:
    nq, npool = dist.shape
    kmax = int(ks[-1])
    d = dist.copy()
    rows = np.repeat(np.arange(nq), exclude.shape[1])
    cols = exclude.reshape(-1)
    keep = cols >= 0
    d[rows[keep], cols[keep]] = np.inf
    n_ok = npool - np.array([len(set(r[r >= 0].tolist())) for r in exclude]) if exclude.size else np.full(nq, npool)
    if np.any(n_ok < kmax):
        q = int(np.argmax(n_ok < kmax))
        raise ValueError(f"query {q}: only {int(n_ok[q])} candidates for k={kmax}")
    order = np.argsort(d, axis=1, kind="stable")[:, :kmax]
    ql = query_labels.astype(bool)[:, None, :]
    pl = pool_labels.astype(bool)[order]
    inter = np.count_nonzero(ql & pl, axis=-1)
    uni = np.count_nonzero(ql | pl, axis=-1)
    iou = np.where(uni == 0, 1.0, inter / np.maximum(uni, 1))
    best = np.maximum.accumulate(iou, axis=1)
    return best[:, np.asarray(ks) - 1]
