"""Training loops: classifier pre-training, generic linear classifiers and the
alternating classifier / operator-network procedure."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from laso import autodiff as ad
from laso.autodiff import Tape, Tensor
from laso.losses import (
    LossWeights,
    bce,
    classifier_loss,
    laso_loss,
    mc_loss,
    pair_distance,
    total_laso_objective,
)
from laso.nets import LasoModel, LinearClassifier
from laso.synth import FeatureBank

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    classifier_lr: float = 1e-3
    pretrain_epochs: int = 10
    loss_weights: LossWeights = field(default_factory=LossWeights)
    n_blocks: int = 3
    dropout: float = 0.3
    slope: float = 0.01
    final_relu: bool = True
    sym_squared: bool = False
    plateau_factor: float = 0.3
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    overlap_pairs: float = 0.5
    seed: int = 0
    verify_decoupling: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss_weights"] = asdict(self.loss_weights)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        if "loss_weights" in doc and not isinstance(doc["loss_weights"], LossWeights):
            doc["loss_weights"] = LossWeights(**doc["loss_weights"])
        return cls(**doc)


def checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


def fit_linear_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    label_weights: Optional[np.ndarray] = None,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    optimizer: str = "adam",
    init: Optional[LinearClassifier] = None,
) -> LinearClassifier:
    """Minibatch BCE training of a linear multi-label classifier.

    ``label_weights`` restricts the loss to a label subset (0/1 per class).
    ``optimizer`` is ``"adam"`` or ``"sgd"`` (plain, no momentum).
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if len(features) == 0:
        raise ValueError("cannot fit a classifier on zero samples")
    n, d = features.shape
    rng = np.random.default_rng(seed)
    clf = init if init is not None else LinearClassifier.create(labels.shape[1], d, rng)
    params = clf.parameters()
    state = ad.AdamState(lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            b = perm[s : s + batch_size]
            ad.zero_grads(params.values())
            with Tape() as tape:
                loss = bce(clf.scores(Tensor(features[b])), labels[b], label_weights)
            tape.backward(loss)
            if optimizer == "adam":
                ad.adam_step(state, params)
            elif optimizer == "sgd":
                for p in params.values():
                    p.data -= lr * p.grad
            else:
                raise ValueError(f"unknown optimizer {optimizer!r}")
    ad.zero_grads(params.values())
    return clf


def pretrain_classifier(bank: FeatureBank, config: TrainConfig) -> LinearClassifier:
    """Linear classifier on the train split, loss restricted to seen labels."""
    idx = bank.indices("train")
    if len(idx) == 0:
        raise ValueError("bank has no training samples")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    init = LinearClassifier.create(bank.n_labels, bank.d, rng)
    return fit_linear_classifier(
        bank.features64(idx),
        bank.labels[idx],
        bank.seen_mask.astype(float),
        epochs=config.pretrain_epochs,
        lr=config.classifier_lr,
        batch_size=config.batch_size,
        seed=config.seed,
        init=init,
    )


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    classifier_steps: int = 0
    operator_steps: int = 0
    classifier_changed_by_operator_steps: int = 0
    operators_changed_by_classifier_steps: int = 0
    checksums: list = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self) -> str:
        cols = ["epoch", "classifier_loss", "laso", "sym", "mc", "total", "lr", "classifier_lr"]
        lines = [",".join(cols)]
        for row in self.epochs:
            lines.append(",".join(str(row["epoch"]) if c == "epoch" else f"{row[c]:.10g}" for c in cols))
        return "\n".join(lines) + "\n"


class PairSampler:
    """Draws a partner for each anchor sample.

    With probability ``overlap`` the partner is drawn among samples sharing
    at least one label with the anchor; otherwise uniformly.
    """

    def __init__(self, labels: np.ndarray, overlap: float = 0.0):
        self.n = len(labels)
        self.overlap = overlap
        self.labels = labels
        self.by_label = [np.flatnonzero(labels[:, k]) for k in range(labels.shape[1])]

    def partners(self, anchors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = rng.integers(0, self.n, size=len(anchors))
        if self.overlap > 0:
            pick = rng.random(len(anchors)) < self.overlap
            for j in np.flatnonzero(pick):
                labs = np.flatnonzero(self.labels[anchors[j]])
                if len(labs):
                    cands = self.by_label[int(rng.choice(labs))]
                    out[j] = cands[rng.integers(len(cands))]
        return out


def _finite(name: str, value: float, epoch: int, batch: int, parts: dict) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        raise TrainingDivergedError(f"non-finite {name} loss at epoch {epoch + 1}, batch {batch}: {detail}")


def train_laso(
    bank: FeatureBank,
    config: Optional[TrainConfig] = None,
    model: Optional[LasoModel] = None,
    progress=None,
) -> tuple[LasoModel, TrainLog]:
    """Alternate per batch between a classifier step and an operator step.

    The classifier C is updated only by its own loss on the real pair; the
    three operator networks are updated only by the weighted sum of the
    set-operation, symmetry and reconstruction losses, with C frozen. If no
    ``model`` is given, one is created and its classifier pre-trained on the
    seen labels.
    """
    config = config or TrainConfig()
    idx = bank.indices("train")
    if len(idx) < 2:
        raise ValueError("training split needs at least two samples")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if model is None:
        model = LasoModel.create(
            bank.d,
            bank.n_labels,
            seed=int(seeds[0].generate_state(1)[0]),
            n_blocks=config.n_blocks,
            dropout=config.dropout,
            slope=config.slope,
            final_relu=config.final_relu,
        )
        model.classifier = pretrain_classifier(bank, config)
    rng = np.random.default_rng(seeds[2])

    F = bank.features64(idx)
    Y = bank.labels[idx].astype(float)
    w_lab = bank.seen_mask.astype(float)
    sampler = PairSampler(bank.labels[idx], config.overlap_pairs)
    c_params = model.classifier_parameters()
    op_params = model.operator_parameters()
    c_state = ad.AdamState(lr=config.classifier_lr)
    op_state = ad.AdamState(lr=config.lr)
    sched_kw = dict(factor=config.plateau_factor, patience=config.plateau_patience, threshold=config.plateau_threshold)
    c_sched = ad.PlateauScheduler(lr=config.classifier_lr, **sched_kw)
    op_sched = ad.PlateauScheduler(lr=config.lr, **sched_kw)
    w = config.loss_weights
    log = TrainLog()
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        sums = dict(classifier_loss=0.0, laso=0.0, sym=0.0, mc=0.0, total=0.0)
        n_batches = 0
        perm = rng.permutation(len(idx))
        for bi, s in enumerate(range(0, len(idx), config.batch_size)):
            a = perm[s : s + config.batch_size]
            if len(a) < 2:
                continue
            b = sampler.partners(a, rng)
            fx, fy, lx, ly = F[a], F[b], Y[a], Y[b]

            # classifier step
            if config.verify_decoupling:
                before = checksum(op_params)
            ad.zero_grads(c_params.values())
            with Tape() as tape:
                lc = classifier_loss(model.classifier, fx, fy, lx, ly, w_lab)
            _finite("classifier", lc.item(), epoch, bi, {"classifier": lc.item()})
            tape.backward(lc)
            ad.adam_step(c_state, c_params)
            log.classifier_steps += 1
            if config.verify_decoupling and checksum(op_params) != before:
                log.operators_changed_by_classifier_steps += 1

            # operator step, classifier frozen
            if config.verify_decoupling:
                before = checksum(c_params)
            ad.zero_grads(op_params.values())
            tx, ty = Tensor(fx), Tensor(fy)
            with Tape() as tape:
                mi = model.m_int.sample_masks(len(a), rng)
                mu = model.m_uni.sample_masks(len(a), rng)
                z_int = model.m_int(tx, ty, train=True, masks=mi)
                z_int_rev = model.m_int(ty, tx, train=True, masks=mi)
                z_uni = model.m_uni(tx, ty, train=True, masks=mu)
                z_uni_rev = model.m_uni(ty, tx, train=True, masks=mu)
                z_sub = model.m_sub(tx, ty, train=True, rng=rng)
                l_laso = laso_loss(model.classifier, z_int, z_uni, z_sub, lx, ly, w_lab)
                l_sym = ad.add(
                    pair_distance(z_int, z_int_rev, config.sym_squared),
                    pair_distance(z_uni, z_uni_rev, config.sym_squared),
                )
                l_mc = mc_loss(model.m_uni, model.m_sub, tx, ty, z_int, z_sub, train=True, rng=rng)
                total = total_laso_objective(w, l_laso, l_sym, l_mc)
            parts = {"laso": l_laso.item(), "sym": l_sym.item(), "mc": l_mc.item()}
            _finite("operator", total.item(), epoch, bi, parts)
            tape.backward(total)
            ad.adam_step(op_state, op_params)
            log.operator_steps += 1
            if config.verify_decoupling and checksum(c_params) != before:
                log.classifier_changed_by_operator_steps += 1

            sums["classifier_loss"] += lc.item()
            sums["laso"] += parts["laso"]
            sums["sym"] += parts["sym"]
            sums["mc"] += parts["mc"]
            sums["total"] += total.item()
            n_batches += 1

        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        c_state.lr = c_sched.step(means["classifier_loss"])
        op_state.lr = op_sched.step(means["total"])
        row = {"epoch": epoch + 1, **means, "lr": op_state.lr, "classifier_lr": c_state.lr}
        log.epochs.append(row)
        logger.info(
            "epoch %d: classifier %.4f laso %.4f sym %.4f mc %.4f total %.4f lr %.2e",
            epoch + 1, means["classifier_loss"], means["laso"], means["sym"], means["mc"], means["total"], op_state.lr,
        )
        if progress is not None:
            progress(row)
    log.checksums = [checksum(c_params), checksum(op_params)]
    log.seconds = time.perf_counter() - t0
    ad.zero_grads(list(c_params.values()) + list(op_params.values()))
    return model, log
