"""Classifier, set-operation, symmetry and reconstruction losses.

Every batch-valued loss is the mean over the batch of a per-sample loss.
Feature and label arguments are (batch, d) / (batch, L) arrays or tensors;
a single 1-D vector is treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from laso import autodiff as ad
from laso.autodiff import Tensor
from laso.labels import set_intersection, set_subtraction, set_union
from laso.nets import LinearClassifier


def _batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        if t.requires_grad:
            raise ad.ShapeError("pass a (batch, n) tensor when gradients are needed")
        return Tensor(t.data[None, :])
    return t


def _labels(l) -> np.ndarray:
    l = np.asarray(l, dtype=float)
    return l[None, :] if l.ndim == 1 else l


@dataclass(frozen=True)
class LossWeights:
    laso: float = 1.0
    sym: float = 1.0
    mc: float = 1.0

    def __post_init__(self):
        for name in ("laso", "sym", "mc"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {w}")


def bce(s, l, label_weights=None) -> Tensor:
    """Sigmoid cross-entropy summed over classes, averaged over the batch."""
    s = _batch(s)
    l = _labels(l)
    if l.shape != s.shape:
        raise ad.ShapeError(f"bce: scores {s.shape} vs labels {l.shape}")
    return ad.reduce_mean(ad.bce_with_logits(s, l, label_weights))


def classifier_loss(c: LinearClassifier, fx, fy, lx, ly, label_weights=None) -> Tensor:
    # features enter as constants: only the classifier receives gradients
    fx = Tensor(_batch(fx).data)
    fy = Tensor(_batch(fy).data)
    return ad.add(bce(c.scores(fx), lx, label_weights), bce(c.scores(fy), ly, label_weights))


def laso_loss(c: LinearClassifier, z_int, z_uni, z_sub, lx, ly, label_weights=None) -> Tensor:
    """BCE of the frozen classifier on each synthesized vector against its exact set-op target."""
    lx = _labels(lx)
    ly = _labels(ly)
    terms = [
        bce(c.scores(_batch(z_int), frozen=True), set_intersection(lx, ly), label_weights),
        bce(c.scores(_batch(z_uni), frozen=True), set_union(lx, ly), label_weights),
        bce(c.scores(_batch(z_sub), frozen=True), set_subtraction(lx, ly), label_weights),
    ]
    return ad.add(ad.add(terms[0], terms[1]), terms[2])


def pair_distance(a: Tensor, b: Tensor, squared: bool = False) -> Tensor:
    """Batch mean of ``(1/n) * ||a - b||`` (or its square), n = vector length."""
    diff = ad.sub(a, b)
    n = a.shape[-1]
    per = ad.reduce_sum(ad.square(diff), axis=-1) if squared else ad.row_norm(diff)
    return ad.reduce_mean(ad.scale(per, 1.0 / n))


def sym_loss(
    m_int,
    m_uni,
    fx,
    fy,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    squared: bool = False,
) -> Tensor:
    """Asymmetry of the intersection and union operators under argument swap.

    Both argument orders share one dropout realization per network.
    """
    fx, fy = _batch(fx), _batch(fy)
    total = None
    for net in (m_int, m_uni):
        masks = net.sample_masks(fx.shape[0], rng) if train and rng is not None else None
        z = net(fx, fy, train=train, rng=rng, masks=masks)
        z_rev = net(fy, fx, train=train, rng=rng, masks=masks)
        term = pair_distance(z, z_rev, squared)
        total = term if total is None else ad.add(total, term)
    return total


def mc_loss(m_uni, m_sub, fx, fy, z_int, z_sub, train: bool = False, rng=None) -> Tensor:
    """Reconstruct each input from the other operators' outputs.

    ``fx ~ uni(sub(fx, fy), int(fx, fy))`` and
    ``fy ~ uni(sub(fy, fx), int(fx, fy))``; squared distances over n.
    """
    fx, fy = _batch(fx), _batch(fy)
    z_int, z_sub = _batch(z_int), _batch(z_sub)
    rec_x = m_uni(z_sub, z_int, train=train, rng=rng)
    rec_y = m_uni(m_sub(fy, fx, train=train, rng=rng), z_int, train=train, rng=rng)
    return ad.add(pair_distance(fx, rec_x, squared=True), pair_distance(fy, rec_y, squared=True))


def total_laso_objective(weights: LossWeights, laso: Tensor, sym: Tensor, mc: Tensor) -> Tensor:
    return ad.add(ad.add(ad.scale(laso, weights.laso), ad.scale(sym, weights.sym)), ad.scale(mc, weights.mc))
