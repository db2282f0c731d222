"""Synthetic multi-label feature banks with exactly known label semantics.

A sample with label set S has feature ``sum_{k in S} a_k * p_k + noise``,
clipped at zero, where ``p_k`` is the prototype of label k. Two prototype
layouts are available:

``disjoint_blocks``
    label k owns its own block of ``d // L`` coordinates. In clean mode
    (unit amplitudes, no noise) max / min / relu-difference of two features
    decode exactly to union / intersection / subtraction of their labels.
``random_nonneg``
    the coordinates are cut into ``n_atoms`` equal blocks ("atoms") and each
    label switches on a random set of ``atoms_per_label`` of them. Labels
    share atoms, so every coordinate is exercised by the seen labels and an
    operator trained on seen labels has a chance to transfer to unseen ones.

Banks carry a split tag per sample: ``train`` (seen labels only when the
bank is filtered), ``test`` (any labels) and ``pool`` (samples containing at
least one unseen label, reserved for training unseen-label classifiers and
drawing few-shot episodes; never used to train operators).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from laso import binio

SPLITS = {"train": 0, "test": 1, "pool": 2}
SPLIT_NAMES = {v: k for k, v in SPLITS.items()}

BANK_MAGIC = b"LBNK"
BANK_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    d: int = 64
    n_labels: int = 20
    seen_count: int = 16
    prototype_mode: str = "random_nonneg"
    n_atoms: int = 48
    atoms_per_label: int = 3
    shared_atoms: bool = True
    amplitude_range: tuple = (0.8, 1.2)
    noise_sigma: float = 0.05
    labels_per_sample: tuple = (1, 4)
    clean_mode: bool = False
    filtered: bool = True

    def __post_init__(self):
        object.__setattr__(self, "amplitude_range", tuple(self.amplitude_range))
        object.__setattr__(self, "labels_per_sample", tuple(self.labels_per_sample))
        self.validate()

    def validate(self) -> None:
        if self.d < 1 or self.n_labels < 2:
            raise ValueError(f"need d >= 1 and at least 2 labels, got d={self.d}, L={self.n_labels}")
        if not 0 < self.seen_count < self.n_labels:
            raise ValueError(f"seen_count must be in [1, L), got {self.seen_count} with L={self.n_labels}")
        if self.prototype_mode == "disjoint_blocks":
            if self.d < self.n_labels:
                raise ValueError(f"disjoint_blocks needs d >= L, got d={self.d}, L={self.n_labels}")
        elif self.prototype_mode == "random_nonneg":
            if not 1 <= self.n_atoms <= self.d:
                raise ValueError(f"n_atoms must be in [1, d], got {self.n_atoms}")
            if not 1 <= self.atoms_per_label <= self.n_atoms:
                raise ValueError(f"atoms_per_label must be in [1, n_atoms], got {self.atoms_per_label}")
        else:
            raise ValueError(f"unknown prototype_mode {self.prototype_mode!r}")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise ValueError(f"amplitude range must satisfy 0 < lo <= hi, got {self.amplitude_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        kmin, kmax = self.labels_per_sample
        if not 1 <= kmin <= kmax:
            raise ValueError(f"labels_per_sample must satisfy 1 <= lo <= hi, got {self.labels_per_sample}")

    @property
    def block_width(self) -> int:
        if self.prototype_mode != "disjoint_blocks":
            raise ValueError("block_width is defined for disjoint_blocks only")
        return self.d // self.n_labels

    def to_dict(self) -> dict:
        out = asdict(self)
        out["amplitude_range"] = list(self.amplitude_range)
        out["labels_per_sample"] = list(self.labels_per_sample)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def clean_blocks(cls, d: int = 64, n_labels: int = 20, seen_count: int = 16, **kw) -> "GeneratorSpec":
        return cls(d=d, n_labels=n_labels, seen_count=seen_count, prototype_mode="disjoint_blocks", clean_mode=True, **kw)


def make_prototypes(spec: GeneratorSpec, rng: np.random.Generator, seen_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Label prototypes: disjoint unit blocks, or unions of random unit atoms.

    With ``shared_atoms`` the atoms of unseen labels are drawn only from
    atoms some seen label uses (needs ``seen_mask``).
    """
    L, d = spec.n_labels, spec.d
    protos = np.zeros((L, d))
    if spec.prototype_mode == "disjoint_blocks":
        w = spec.block_width
        for k in range(L):
            protos[k, k * w : (k + 1) * w] = 1.0
        return protos
    w = d // spec.n_atoms
    used: set = set()
    seen_atoms: set = set()
    order = list(range(L))
    if spec.shared_atoms:
        if seen_mask is None:
            raise ValueError("shared_atoms needs the seen mask")
        order = list(np.flatnonzero(seen_mask)) + list(np.flatnonzero(~seen_mask))
    for k in order:
        choices = np.arange(spec.n_atoms)
        if spec.shared_atoms and not seen_mask[k]:
            choices = np.array(sorted(seen_atoms))
        size = min(spec.atoms_per_label, len(choices))
        for _ in range(1000):
            atoms = tuple(sorted(rng.choice(choices, size, replace=False).tolist()))
            if atoms not in used:
                break
        used.add(atoms)
        if spec.shared_atoms and seen_mask[k]:
            seen_atoms.update(atoms)
        for a in atoms:
            protos[k, a * w : (a + 1) * w] = 1.0
    return protos


def split_seen_unseen(n_labels: int, seen_count: int, seed) -> np.ndarray:
    """Boolean mask with exactly ``seen_count`` seen labels, chosen uniformly."""
    if not 0 < seen_count < n_labels:
        raise ValueError(f"seen_count must be in [1, {n_labels}), got {seen_count}")
    rng = np.random.default_rng(seed)
    mask = np.zeros(n_labels, dtype=bool)
    mask[rng.permutation(n_labels)[:seen_count]] = True
    return mask


@dataclass
class FeatureBank:
    features: np.ndarray  # (N, d) float32, nonnegative
    labels: np.ndarray  # (N, L) uint8
    split: np.ndarray  # (N,) uint8, see SPLITS
    seen_mask: np.ndarray  # (L,) bool
    seed: Optional[int] = None
    spec: Optional[GeneratorSpec] = field(default=None, compare=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.split = np.ascontiguousarray(self.split, dtype=np.uint8)
        self.seen_mask = np.asarray(self.seen_mask, dtype=bool)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (n, self.seen_mask.shape[0]) or self.split.shape != (n,):
            raise ValueError(
                f"inconsistent bank shapes: features {self.features.shape}, labels {self.labels.shape}, "
                f"split {self.split.shape}, seen mask {self.seen_mask.shape}"
            )
        if np.any(self.labels > 1):
            raise ValueError("labels must be 0/1")
        if np.any(self.split > max(SPLITS.values())):
            raise ValueError("unknown split tag in bank")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    @property
    def unseen_mask(self) -> np.ndarray:
        return ~self.seen_mask

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS[split])

    def features64(self, idx=None) -> np.ndarray:
        f = self.features if idx is None else self.features[idx]
        return f.astype(np.float64)

    def equals(self, other: "FeatureBank") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split, other.split)
            and np.array_equal(self.seen_mask, other.seen_mask)
        )


def _draw_labels(rng, allowed: np.ndarray, kmin: int, kmax: int, must_hit: Optional[np.ndarray] = None) -> np.ndarray:
    pool = np.flatnonzero(allowed)
    hi = min(kmax, len(pool))
    lo = min(kmin, hi)
    while True:
        k = int(rng.integers(lo, hi + 1))
        chosen = rng.choice(pool, size=k, replace=False)
        if must_hit is None or must_hit[chosen].any():
            return chosen


def generate_bank(
    spec: GeneratorSpec,
    n: int,
    seed: int,
    n_test: Optional[int] = None,
    n_pool: Optional[int] = None,
) -> FeatureBank:
    """Draw ``n`` train, ``n_test`` test and ``n_pool`` pool samples.

    Defaults: ``n_test = n // 2``, ``n_pool = n // 4``. Deterministic in
    ``seed``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    n_test = n // 2 if n_test is None else n_test
    n_pool = n // 4 if n_pool is None else n_pool
    if n_test < 0 or n_pool < 0:
        raise ValueError("sample counts must be >= 0")
    seq = np.random.SeedSequence(seed)
    proto_seed, mask_seed, draw_seed = seq.spawn(3)
    seen = split_seen_unseen(spec.n_labels, spec.seen_count, mask_seed)
    protos = make_prototypes(spec, np.random.default_rng(proto_seed), seen)
    rng = np.random.default_rng(draw_seed)

    everything = np.ones(spec.n_labels, dtype=bool)
    plan = [
        ("train", n, seen if spec.filtered else everything, None),
        ("test", n_test, everything, None),
        ("pool", n_pool, everything, ~seen),
    ]
    total = n + n_test + n_pool
    feats = np.zeros((total, spec.d))
    labels = np.zeros((total, spec.n_labels), dtype=np.uint8)
    split = np.zeros(total, dtype=np.uint8)
    kmin, kmax = spec.labels_per_sample
    row = 0
    for name, count, allowed, must_hit in plan:
        for _ in range(count):
            chosen = _draw_labels(rng, allowed, kmin, kmax, must_hit)
            if spec.clean_mode:
                amps = np.ones(len(chosen))
            else:
                amps = rng.uniform(*spec.amplitude_range, size=len(chosen))
            f = amps @ protos[chosen]
            if not spec.clean_mode and spec.noise_sigma > 0:
                f = f + rng.normal(0.0, spec.noise_sigma, size=spec.d)
            feats[row] = np.maximum(f, 0.0)
            labels[row, chosen] = 1
            split[row] = SPLITS[name]
            row += 1
    return FeatureBank(feats, labels, split, seen, seed=seed, spec=spec)


def prototypes_for(spec: GeneratorSpec, seed: int) -> np.ndarray:
    """The prototypes :func:`generate_bank` uses for ``seed``."""
    proto_seed, mask_seed, _ = np.random.SeedSequence(seed).spawn(3)
    seen = split_seen_unseen(spec.n_labels, spec.seen_count, mask_seed)
    return make_prototypes(spec, np.random.default_rng(proto_seed), seen)


def render_label_sets(spec: GeneratorSpec, seed: int, label_sets, split: str = "pool") -> FeatureBank:
    """Clean-mode samples (unit amplitudes, no noise) carrying exactly ``label_sets``.

    Uses the prototypes and seen mask of ``generate_bank(spec, ..., seed)``;
    empty label sets give the zero vector.
    """
    labels = np.asarray(label_sets, dtype=np.uint8).reshape(-1, spec.n_labels)
    seen = split_seen_unseen(spec.n_labels, spec.seen_count, np.random.SeedSequence(seed).spawn(3)[1])
    feats = labels.astype(float) @ prototypes_for(spec, seed)
    return FeatureBank(feats, labels, np.full(len(labels), SPLITS[split]), seen, seed=seed, spec=spec)


def oracle_decode(spec: GeneratorSpec, f, threshold: float = 0.5) -> np.ndarray:
    """Label k is on iff the sum of ``f`` over block k exceeds ``threshold``."""
    if spec.prototype_mode != "disjoint_blocks":
        raise ValueError("oracle_decode needs a disjoint_blocks generator")
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != spec.d:
        raise ValueError(f"feature length {f.shape[-1]} does not match d={spec.d}")
    w = spec.block_width
    sums = f[..., : w * spec.n_labels].reshape(f.shape[:-1] + (spec.n_labels, w)).sum(axis=-1)
    return (sums > threshold).astype(np.uint8)


def oracle_classifier_weights(spec: GeneratorSpec, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Linear (W, b) whose positive scores coincide with :func:`oracle_decode`."""
    if spec.prototype_mode != "disjoint_blocks":
        raise ValueError("the oracle classifier needs a disjoint_blocks generator")
    w = spec.block_width
    W = np.zeros((spec.n_labels, spec.d))
    for k in range(spec.n_labels):
        W[k, k * w : (k + 1) * w] = 1.0
    return W, np.full(spec.n_labels, -threshold)


# ---------------------------------------------------------------- persistence


def bank_bytes(bank: FeatureBank) -> bytes:
    parts = [
        BANK_MAGIC,
        binio.pack("IQQQ", BANK_VERSION, bank.n, bank.d, bank.n_labels),
        bank.seen_mask.astype(np.uint8).tobytes(),
        bank.split.tobytes(),
        bank.features.astype("<f4").tobytes(),
        bank.labels.tobytes(),
    ]
    return b"".join(parts)


def save_bank(bank: FeatureBank, path: Union[str, Path]) -> None:
    Path(path).write_bytes(bank_bytes(bank))


def bank_from_bytes(buf: bytes, what: str = "bank") -> FeatureBank:
    r = binio.Reader(buf, what)
    r.magic(BANK_MAGIC)
    version = r.unpack("I")
    if version != BANK_VERSION:
        raise binio.UnsupportedVersionError(f"{what}: format version {version}, this reader supports {BANK_VERSION}")
    n, d, L = r.unpack("QQQ")
    need = L + n + 4 * n * d + n * L
    if len(r.buf) - r.pos < need:
        raise binio.TruncatedFileError(f"{what}: header promises {need} payload bytes, {len(r.buf) - r.pos} present")
    seen = r.array("u1", L)
    split = r.array("u1", n)
    feats = r.array("<f4", n * d).reshape(n, d)
    labels = r.array("u1", n * L).reshape(n, L)
    if not r.at_end():
        raise binio.FileFormatError(f"{what}: {len(r.buf) - r.pos} trailing bytes")
    if np.any(seen > 1):
        raise binio.FileFormatError(f"{what}: seen mask entries must be 0/1")
    try:
        return FeatureBank(feats.astype(np.float32), labels, split, seen.astype(bool))
    except ValueError as exc:
        raise binio.FileFormatError(f"{what}: {exc}") from exc


def load_bank(path: Union[str, Path]) -> FeatureBank:
    return bank_from_bytes(Path(path).read_bytes(), what=str(path))


def import_csv(
    path: Union[str, Path],
    n_labels: int,
    seen_mask=None,
    split: str = "train",
) -> FeatureBank:
    """Read rows of ``d`` feature values followed by ``n_labels`` 0/1 labels."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) <= n_labels:
                raise ValueError(f"{path}:{lineno}: expected features then {n_labels} labels, got {len(rec)} fields")
            rows.append(rec)
    if not rows:
        raise ValueError(f"{path}: no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: rows have differing field counts")
    arr = np.array(rows, dtype=float)
    feats, labels = arr[:, : width - n_labels], arr[:, width - n_labels :]
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"{path}: label columns must be 0 or 1")
    seen = np.ones(n_labels, dtype=bool) if seen_mask is None else np.asarray(seen_mask, dtype=bool)
    return FeatureBank(feats, labels.astype(np.uint8), np.full(len(arr), SPLITS[split], dtype=np.uint8), seen)


def concat_banks(*banks: FeatureBank) -> FeatureBank:
    first = banks[0]
    for b in banks[1:]:
        if b.d != first.d or b.n_labels != first.n_labels or not np.array_equal(b.seen_mask, first.seen_mask):
            raise ValueError("banks differ in dimension, vocabulary or seen mask")
    return FeatureBank(
        np.concatenate([b.features for b in banks]),
        np.concatenate([b.labels for b in banks]),
        np.concatenate([b.split for b in banks]),
        first.seen_mask,
    )
