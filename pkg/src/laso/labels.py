"""Exact set algebra on binary label vectors.

All functions accept a single vector of length L or a stack of them
(shape ``(..., L)``) and return ``uint8`` indicator arrays.
"""

from __future__ import annotations

import numpy as np


def _pair(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{op}: label vectors differ in shape, {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def set_union(a, b) -> np.ndarray:
    a, b = _pair(a, b, "set_union")
    return (a | b).astype(np.uint8)


def set_intersection(a, b) -> np.ndarray:
    a, b = _pair(a, b, "set_intersection")
    return (a & b).astype(np.uint8)


def set_subtraction(a, b) -> np.ndarray:
    a, b = _pair(a, b, "set_subtraction")
    return (a & ~b).astype(np.uint8)


SET_OPS = {
    "uni": set_union,
    "int": set_intersection,
    "sub": set_subtraction,
}


def apply_set_op(kind: str, a, b) -> np.ndarray:
    try:
        return SET_OPS[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown set operation {kind!r}; expected one of {sorted(SET_OPS)}") from None


def iou(a, b):
    """|a & b| / |a | b| along the last axis; two empty sets give 1.0."""
    a, b = _pair(a, b, "iou")
    inter = np.count_nonzero(a & b, axis=-1)
    union = np.count_nonzero(a | b, axis=-1)
    out = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(out) if out.ndim == 0 else out


def to_indicator(labels, size: int) -> np.ndarray:
    """Build an indicator vector from an iterable of label indices."""
    out = np.zeros(size, dtype=np.uint8)
    idx = list(labels)
    if idx and (min(idx) < 0 or max(idx) >= size):
        raise ValueError(f"label index out of range for vocabulary of size {size}: {idx}")
    out[idx] = 1
    return out


def to_index_set(vec) -> set[int]:
    return {int(i) for i in np.flatnonzero(np.asarray(vec))}
