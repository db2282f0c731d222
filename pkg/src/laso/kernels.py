"""Ranking kernels with a compiled backend when available.

The Cython extension ``laso._ckernels`` is used if it imports; otherwise,
or when ``LASO_PURE_PYTHON=1`` is set, the numpy versions in
``laso._pykernels`` are used. Both give the same results (AP values may
differ in the last bits because of summation order).
"""

from __future__ import annotations

import os

import numpy as np

from laso import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("LASO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from laso import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels


def backend_module(name: str):
    if name == "cython":
        from laso import _ckernels

        return _ckernels
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown kernel backend {name!r}")


def average_precision_columns(scores, positives, backend=None) -> np.ndarray:
    """AP of every column of ``scores`` against 0/1 ``positives``; NaN where a column has no positives."""
    s = np.ascontiguousarray(scores, dtype=np.float64)
    p = np.ascontiguousarray(positives, dtype=np.uint8)
    if s.ndim == 1:
        s, p = s[:, None], p[:, None]
    if s.shape != p.shape:
        raise ValueError(f"scores {s.shape} vs positives {p.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    impl = _impl if backend is None else backend_module(backend)
    return impl.average_precision_columns(s, p)


def topk_max_iou(dist, query_labels, pool_labels, exclude, ks, backend=None) -> np.ndarray:
    d = np.ascontiguousarray(dist, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    ql = np.ascontiguousarray(query_labels, dtype=np.uint8)
    pl = np.ascontiguousarray(pool_labels, dtype=np.uint8)
    ex = np.ascontiguousarray(exclude, dtype=np.int64)
    if ex.ndim != 2 or ex.shape[0] != d.shape[0]:
        ex = ex.reshape(d.shape[0], -1)
    k = np.ascontiguousarray(sorted(int(x) for x in ks), dtype=np.int64)
    if k.size == 0 or k[0] < 1:
        raise ValueError(f"k values must be >= 1, got {list(ks)}")
    if ql.shape[0] != d.shape[0] or pl.shape[0] != d.shape[1] or ql.shape[1] != pl.shape[1]:
        raise ValueError(f"shapes disagree: dist {d.shape}, query labels {ql.shape}, pool labels {pl.shape}")
    impl = _impl if backend is None else backend_module(backend)
    out = impl.topk_max_iou(d, ql, pl, ex, k)
    # restore caller's k order
    pos = {int(v): i for i, v in enumerate(k)}
    return out[:, [pos[int(x)] for x in ks]]
