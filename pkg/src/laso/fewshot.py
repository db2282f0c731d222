"""Multi-label few-shot benchmark with feature-space augmentation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from laso import autodiff as ad
from laso.autodiff import Tape, Tensor
from laso.labels import apply_set_op
from laso.losses import bce
from laso.metrics import per_class_ap
from laso.nets import LasoModel, LinearClassifier, analytic_op, classify
from laso.synth import FeatureBank

logger = logging.getLogger(__name__)

METHODS = ("none", "mixup", "analytic_int", "analytic_uni", "analytic_sub", "learned_int", "learned_uni", "learned_sub")
DEFAULT_METHODS = ("none", "mixup", "analytic_int", "analytic_uni", "learned_int", "learned_uni")


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class Episode:
    support: np.ndarray  # bank row indices
    query: np.ndarray
    n_shot: int
    labels: np.ndarray  # target label indices
    counts: dict  # label -> occurrences in the support set

    def to_dict(self) -> dict:
        return {
            "support": self.support.tolist(),
            "n_query": int(len(self.query)),
            "n_shot": self.n_shot,
            "labels": self.labels.tolist(),
            "counts": {str(k): v for k, v in self.counts.items()},
        }


def build_episode(
    bank: FeatureBank,
    target_mask: Optional[np.ndarray] = None,
    n_shot: int = 1,
    seed=0,
    source_split: str = "pool",
    query_split: str = "test",
) -> Episode:
    """Greedy support-set selection over a seed-shuffled source split.

    A sample is admitted iff it carries at least one target label whose
    count is still below ``n_shot``; selection stops once every target
    label reaches ``n_shot``. The query set is the whole ``query_split``.
    """
    if n_shot < 1:
        raise ValueError("n_shot must be >= 1")
    mask = bank.unseen_mask if target_mask is None else np.asarray(target_mask, bool)
    targets = np.flatnonzero(mask)
    if len(targets) == 0:
        raise ValueError("no target labels")
    pool = bank.indices(source_split)
    sub = bank.labels[pool][:, targets].astype(bool)
    avail = sub.sum(axis=0)
    for k, a in zip(targets, avail):
        if a < n_shot:
            raise InsufficientSamplesError(
                f"label {int(k)} has {int(a)} samples in split {source_split!r}, needs {n_shot}"
            )
    order = np.random.default_rng(seed).permutation(len(pool))
    counts = np.zeros(len(targets), dtype=int)
    chosen = []
    for i in order:
        if np.all(counts >= n_shot):
            break
        row = sub[i]
        if np.any(row & (counts < n_shot)):
            chosen.append(pool[i])
            counts += row
    return Episode(
        support=np.asarray(chosen, dtype=np.int64),
        query=bank.indices(query_split),
        n_shot=n_shot,
        labels=targets,
        counts={int(k): int(c) for k, c in zip(targets, counts)},
    )


@dataclass
class AugmentationPolicy:
    method: str = "none"
    n_synth: Optional[int] = None  # per epoch; None means synth_factor x support size
    synth_factor: int = 4
    skip_empty: bool = True
    mixup_alpha: float = 0.2
    analytic_variant: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown augmentation method {self.method!r}; choose from {METHODS}")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if self.n_synth is not None and self.n_synth < 0:
            raise ValueError("n_synth must be >= 0")

    def budget(self, n_support: int) -> int:
        return self.synth_factor * n_support if self.n_synth is None else self.n_synth

    @property
    def op(self) -> Optional[str]:
        return self.method.split("_", 1)[1] if "_" in self.method else None


def synthesize_augmentations(
    policy: AugmentationPolicy,
    features: np.ndarray,
    labels: np.ndarray,
    model: Optional[LasoModel] = None,
    rng: Optional[np.random.Generator] = None,
    count: Optional[int] = None,
    label_mask: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthesize ``count`` (default: the policy budget) samples from random support pairs.

    Returns (features, labels) arrays; labels are soft for mixup. With
    ``skip_empty``, pairs whose target is empty over ``label_mask`` are never
    drawn; if no pair has a non-empty target, empty targets are kept.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n, d = features.shape
    count = policy.budget(n) if count is None else count
    if policy.method == "none" or count == 0:
        return np.zeros((0, d)), np.zeros((0, labels.shape[1]))
    if n < 2:
        raise ValueError("augmentation needs at least two support samples")
    rng = rng if rng is not None else np.random.default_rng(0)

    if policy.method == "mixup":
        i = rng.integers(0, n, size=count)
        j = (i + rng.integers(1, n, size=count)) % n
        lam = rng.beta(policy.mixup_alpha, policy.mixup_alpha, size=count)[:, None]
        return lam * features[i] + (1 - lam) * features[j], lam * labels[i] + (1 - lam) * labels[j]

    ii, jj = np.nonzero(~np.eye(n, dtype=bool))  # all ordered pairs i != j
    op = policy.op
    targets = apply_set_op(op, labels[ii].astype(np.uint8), labels[jj].astype(np.uint8))
    if policy.skip_empty:
        m = np.ones(labels.shape[1], bool) if label_mask is None else np.asarray(label_mask, bool)
        ok = targets[:, m].any(axis=1)
        if ok.any():
            ii, jj, targets = ii[ok], jj[ok], targets[ok]
        else:
            logger.debug("no support pair has a non-empty %s target; keeping empty targets", op)
    pick = rng.integers(0, len(ii), size=count)
    fx, fy = features[ii[pick]], features[jj[pick]]
    if policy.method.startswith("learned"):
        if model is None:
            raise ValueError(f"method {policy.method!r} needs a trained model")
        z = model.apply(op, fx, fy)
    else:
        z = analytic_op(op, policy.analytic_variant, fx, fy)
    return z, targets[pick].astype(float)


@dataclass
class EpisodeTrainer:
    """Plain minibatch SGD on a fresh zero-initialized linear classifier."""

    epochs: int = 40
    lr: float = 0.01
    batch_size: int = 8

    def fit(
        self,
        support_f: np.ndarray,
        support_l: np.ndarray,
        label_weights: np.ndarray,
        policy: AugmentationPolicy,
        model: Optional[LasoModel],
        shuffle_seed,
        synth_seed,
    ) -> LinearClassifier:
        n_labels = support_l.shape[1]
        clf = LinearClassifier.zeros(n_labels, support_f.shape[1])
        params = clf.parameters()
        shuffle_rng = np.random.default_rng(shuffle_seed)
        synth_rng = np.random.default_rng(synth_seed)
        for _ in range(self.epochs):
            zf, zl = synthesize_augmentations(policy, support_f, support_l, model, synth_rng, label_mask=label_weights > 0)
            f = np.concatenate([support_f, zf])
            l = np.concatenate([support_l, zl])
            perm = shuffle_rng.permutation(len(f))
            for s in range(0, len(f), self.batch_size):
                b = perm[s : s + self.batch_size]
                ad.zero_grads(params.values())
                with Tape() as tape:
                    loss = bce(clf.scores(Tensor(f[b])), l[b], label_weights)
                tape.backward(loss)
                for p in params.values():
                    p.data -= self.lr * p.grad
        ad.zero_grads(params.values())
        return clf


@dataclass
class BenchmarkConfig:
    methods: tuple = DEFAULT_METHODS
    shots: tuple = (1, 5)
    episodes: int = 10
    epochs: int = 40
    lr: float = 0.01
    batch_size: int = 8
    synth_factor: int = 4
    n_synth: Optional[int] = None
    skip_empty: bool = True
    mixup_alpha: float = 0.2
    analytic_variant: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        out["shots"] = list(self.shots)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown benchmark fields: {sorted(unknown)}")
        for k in ("methods", "shots"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)


@dataclass
class BenchmarkResult:
    rows: list = field(default_factory=list)  # dicts: n_shot, episode, method, map, n_support, n_synth
    config: dict = field(default_factory=dict)

    def scores(self, method: str, n_shot: int) -> np.ndarray:
        return np.array([r["map"] for r in self.rows if r["method"] == method and r["n_shot"] == n_shot])

    def mean(self, method: str, n_shot: int) -> float:
        return float(self.scores(method, n_shot).mean())

    def std(self, method: str, n_shot: int) -> float:
        return float(self.scores(method, n_shot).std())

    def summary(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r["method"], {})
        for m in out:
            shots = sorted({r["n_shot"] for r in self.rows if r["method"] == m})
            out[m] = {f"{k}-shot": {"mean": self.mean(m, k), "std": self.std(m, k)} for k in shots}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_shot", "episode", "method", "map", "n_support", "n_synth"])
        for r in self.rows:
            w.writerow([r["n_shot"], r["episode"], r["method"], f"{r['map']:.6f}", r["n_support"], r["n_synth"]])
        return buf.getvalue()

    def table_csv(self) -> str:
        """Mean (std) mAP per method, one column per shot count."""
        shots = sorted({r["n_shot"] for r in self.rows})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"{k}_shot_mean" for k in shots] + [f"{k}_shot_std" for k in shots])
        for m in dict.fromkeys(r["method"] for r in self.rows):
            w.writerow([m] + [f"{self.mean(m, k):.6f}" for k in shots] + [f"{self.std(m, k):.6f}" for k in shots])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"config": self.config, "summary": self.summary()}


def episode_map(clf: LinearClassifier, bank: FeatureBank, episode: Episode) -> float:
    scores = classify(clf, bank.features64(episode.query))[:, episode.labels]
    aps = per_class_ap(scores, bank.labels[episode.query][:, episode.labels])
    aps = aps[np.isfinite(aps)]
    return float(aps.mean()) if len(aps) else float("nan")


def run_benchmark(
    bank: FeatureBank,
    model: Optional[LasoModel],
    config: Optional[BenchmarkConfig] = None,
    target_mask: Optional[np.ndarray] = None,
) -> BenchmarkResult:
    """Train and score a fresh classifier per (shot, episode, method).

    All methods share the episodes, the per-epoch synthesized-sample budget,
    the minibatch shuffling stream and the epoch count.
    """
    config = config or BenchmarkConfig()
    for m in config.methods:
        if m not in METHODS:
            raise ValueError(f"unknown augmentation method {m!r}")
        if m.startswith("learned") and model is None:
            raise ValueError(f"method {m!r} needs a trained model")
    mask = bank.unseen_mask if target_mask is None else np.asarray(target_mask, bool)
    w_lab = mask.astype(float)
    trainer = EpisodeTrainer(config.epochs, config.lr, config.batch_size)
    result = BenchmarkResult(config=config.to_dict())
    for n_shot in config.shots:
        for e, ep_seq in enumerate(np.random.SeedSequence([config.seed, n_shot]).spawn(config.episodes)):
            episode_seed, shuffle_seed, synth_seed = ep_seq.spawn(3)
            ep = build_episode(bank, mask, n_shot, episode_seed)
            sf, sl = bank.features64(ep.support), bank.labels[ep.support].astype(float)
            for method in config.methods:
                policy = AugmentationPolicy(
                    method=method,
                    n_synth=0 if method == "none" else config.n_synth,
                    synth_factor=config.synth_factor,
                    skip_empty=config.skip_empty,
                    mixup_alpha=config.mixup_alpha,
                    analytic_variant=config.analytic_variant,
                )
                clf = trainer.fit(sf, sl, w_lab, policy, model, shuffle_seed, synth_seed)
                score = episode_map(clf, bank, ep)
                result.rows.append(
                    dict(n_shot=n_shot, episode=e, method=method, map=score, n_support=len(ep.support), n_synth=policy.budget(len(ep.support)))
                )
                logger.info("%d-shot episode %d %s: mAP %.4f", n_shot, e, method, score)
    return result
