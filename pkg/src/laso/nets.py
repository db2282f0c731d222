"""Label-set operator networks, the linear classifier, analytic operators and
composed set expressions.

An operator network maps a pair of feature vectors ``(fx, fy)`` to one
vector in the same space by running an MLP on their concatenation. The
same instance is used for both argument orders.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from laso import autodiff as ad
from laso import binio
from laso.autodiff import Tensor
from laso.labels import apply_set_op

OPS = ("int", "uni", "sub")

CHECKPOINT_MAGIC = b"LASO"
CHECKPOINT_VERSION = 1


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        return Tensor(t.data[None, :], requires_grad=False), True
    return t, False


@dataclass
class MlpBlock:
    """Fully-connected layer, batch norm, activation, dropout."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    stats: ad.BatchNormStats
    activation: str = "leaky_relu"
    dropout: float = 0.3
    slope: float = 0.01

    @classmethod
    def create(cls, n_in: int, n_out: int, rng: np.random.Generator, **kw) -> "MlpBlock":
        return cls(
            weight=Tensor(_uniform(rng, (n_out, n_in), n_in), requires_grad=True),
            bias=Tensor(_uniform(rng, (n_out,), n_in), requires_grad=True),
            gamma=Tensor(np.ones(n_out), requires_grad=True),
            beta=Tensor(np.zeros(n_out), requires_grad=True),
            stats=ad.BatchNormStats.fresh(n_out),
            **kw,
        )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias, "gamma": self.gamma, "beta": self.beta}

    def forward(self, x: Tensor, train: bool, rng=None, mask=None) -> Tensor:
        h = ad.add_bias(ad.matmul(x, self.weight, transpose_b=True), self.bias)
        h = ad.batch_norm(h, self.gamma, self.beta, self.stats, train)
        if self.activation == "leaky_relu":
            h = ad.leaky_relu(h, self.slope)
        elif self.activation == "relu":
            h = ad.relu(h)
        elif self.activation != "identity":
            raise ValueError(f"unknown activation {self.activation!r}")
        return ad.dropout(h, self.dropout, train, rng=rng, mask=mask)


class LasoOperatorNet:
    """MLP over ``concat(fx, fy)`` producing a vector of the input dimension."""

    def __init__(self, blocks: list[MlpBlock]):
        if not blocks:
            raise ValueError("an operator net needs at least one block")
        for a, b in zip(blocks, blocks[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"block widths do not chain: {a.n_out} -> {b.n_in}")
        if blocks[0].n_in != 2 * blocks[-1].n_out:
            raise ValueError(
                f"first block takes {blocks[0].n_in} inputs, expected twice the output dim {blocks[-1].n_out}"
            )
        self.blocks = blocks

    @classmethod
    def create(
        cls,
        d: int,
        rng: np.random.Generator,
        n_blocks: int = 3,
        dropout: float = 0.3,
        slope: float = 0.01,
        final_relu: bool = True,
    ) -> "LasoOperatorNet":
        if n_blocks == 3:
            widths = [2 * d, d, d]
        elif n_blocks == 4:
            widths = [2 * d, 2 * d, d, d]
        else:
            raise ValueError(f"n_blocks must be 3 or 4, got {n_blocks}")
        blocks = []
        n_in = 2 * d
        for i, w in enumerate(widths):
            last = i == len(widths) - 1
            act = ("relu" if final_relu else "identity") if last else "leaky_relu"
            blocks.append(MlpBlock.create(n_in, w, rng, activation=act, dropout=0.0 if last else dropout, slope=slope))
            n_in = w
        return cls(blocks)

    @property
    def dim(self) -> int:
        return self.blocks[-1].n_out

    @property
    def final_relu(self) -> bool:
        return self.blocks[-1].activation == "relu"

    def parameters(self) -> dict[str, Tensor]:
        return {f"block{i}.{k}": v for i, b in enumerate(self.blocks) for k, v in b.parameters().items()}

    def sample_masks(self, batch: int, rng: np.random.Generator) -> list:
        """Draw one dropout realization for every block (None where dropout is off)."""
        return [
            ad.dropout_mask((batch, b.n_out), b.dropout, rng) if b.dropout > 0 else None for b in self.blocks
        ]

    def forward(self, fx, fy, train: bool = False, rng=None, masks=None) -> Tensor:
        fx, single = _as_batch(fx) if not isinstance(fx, Tensor) or fx.data.ndim == 1 else (fx, False)
        fy, _ = _as_batch(fy) if not isinstance(fy, Tensor) or fy.data.ndim == 1 else (fy, False)
        if fx.shape != fy.shape or fx.shape[-1] != self.dim:
            raise ad.ShapeError(f"operator net of dim {self.dim} got inputs {fx.shape} and {fy.shape}")
        if train and masks is None and rng is not None:
            masks = self.sample_masks(fx.shape[0], rng)
        h = ad.concat_lastdim(fx, fy)
        for i, block in enumerate(self.blocks):
            h = block.forward(h, train, mask=None if masks is None else masks[i], rng=rng)
        if single:
            return Tensor(h.data[0]) if not h.requires_grad else h
        return h

    __call__ = forward


class AnalyticOperator:
    """Parameter-free operator with the same call signature as a learned net.

    variant 1: ``fx + fy``, ``fx * fy``, ``fx - fy`` for uni / int / sub;
    variant 2: ``max``, ``min``, ``relu(fx - fy)``.
    """

    def __init__(self, kind: str, variant: int = 2):
        if kind not in OPS:
            raise ValueError(f"unknown operation {kind!r}")
        if variant not in (1, 2):
            raise ValueError(f"analytic variant must be 1 or 2, got {variant}")
        self.kind = kind
        self.variant = variant

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def sample_masks(self, batch, rng):
        return None

    def forward(self, fx, fy, train: bool = False, rng=None, masks=None) -> Tensor:
        fx = fx if isinstance(fx, Tensor) else Tensor(fx)
        fy = fy if isinstance(fy, Tensor) else Tensor(fy)
        if fx.shape != fy.shape:
            raise ad.ShapeError(f"analytic {self.kind}: inputs {fx.shape} and {fy.shape}")
        if self.variant == 1:
            fn = {"uni": ad.add, "int": ad.mul, "sub": ad.sub}[self.kind]
            return fn(fx, fy)
        if self.kind == "uni":
            return ad.maximum(fx, fy)
        if self.kind == "int":
            return ad.minimum(fx, fy)
        return ad.relu(ad.sub(fx, fy))

    __call__ = forward


def analytic_op(kind: str, variant: int, fx, fy) -> np.ndarray:
    return AnalyticOperator(kind, variant)(np.asarray(fx, float), np.asarray(fy, float)).data


@dataclass
class LinearClassifier:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, n_labels: int, d: int, rng: np.random.Generator) -> "LinearClassifier":
        return cls(
            Tensor(_uniform(rng, (n_labels, d), d), requires_grad=True),
            Tensor(_uniform(rng, (n_labels,), d), requires_grad=True),
        )

    @classmethod
    def zeros(cls, n_labels: int, d: int) -> "LinearClassifier":
        return cls(Tensor(np.zeros((n_labels, d)), requires_grad=True), Tensor(np.zeros(n_labels), requires_grad=True))

    @property
    def n_labels(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def scores(self, f: Tensor, frozen: bool = False) -> Tensor:
        """Pre-sigmoid scores ``W f + b`` for a (batch, d) tensor.

        With ``frozen`` the parameters enter as constants, so gradients reach
        ``f`` but never the classifier.
        """
        if f.shape[-1] != self.dim:
            raise ad.ShapeError(f"classifier over dim {self.dim} got features of shape {f.shape}")
        w, b = (Tensor(self.weight.data), Tensor(self.bias.data)) if frozen else (self.weight, self.bias)
        x = f if f.data.ndim == 2 else Tensor(f.data[None, :]) if not f.requires_grad else f
        if x.data.ndim == 1:
            raise ad.ShapeError("classifier.scores: pass a (batch, d) tensor when gradients are needed")
        return ad.add_bias(ad.matmul(x, w, transpose_b=True), b)


def classify(c: LinearClassifier, f) -> np.ndarray:
    """Scores for one vector (returns length L) or a batch (returns N x L)."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != c.dim:
        raise ad.ShapeError(f"classifier over dim {c.dim} got features of shape {f.shape}")
    return f @ c.weight.data.T + c.bias.data


@dataclass
class LasoModel:
    m_int: LasoOperatorNet
    m_uni: LasoOperatorNet
    m_sub: LasoOperatorNet
    classifier: LinearClassifier

    @classmethod
    def create(cls, d: int, n_labels: int, seed: int = 0, **net_kw) -> "LasoModel":
        rng = np.random.default_rng(seed)
        return cls(
            LasoOperatorNet.create(d, rng, **net_kw),
            LasoOperatorNet.create(d, rng, **net_kw),
            LasoOperatorNet.create(d, rng, **net_kw),
            LinearClassifier.create(n_labels, d, rng),
        )

    @property
    def dim(self) -> int:
        return self.m_int.dim

    @property
    def n_labels(self) -> int:
        return self.classifier.n_labels

    def net(self, kind: str) -> LasoOperatorNet:
        try:
            return {"int": self.m_int, "uni": self.m_uni, "sub": self.m_sub}[kind]
        except KeyError:
            raise ValueError(f"unknown operation {kind!r}") from None

    def operator_parameters(self) -> dict[str, Tensor]:
        out = {}
        for kind in OPS:
            out.update({f"m_{kind}.{k}": v for k, v in self.net(kind).parameters().items()})
        return out

    def classifier_parameters(self) -> dict[str, Tensor]:
        return {f"c.{k}": v for k, v in self.classifier.parameters().items()}

    def apply(self, kind: str, fx, fy, batch_size: int = 4096) -> np.ndarray:
        """Eval-mode application on arrays of shape (d,) or (N, d)."""
        fx = np.asarray(fx, dtype=float)
        fy = np.asarray(fy, dtype=float)
        if fx.ndim == 1:
            return self.net(kind)(fx, fy).data.reshape(-1)
        parts = [self.net(kind)(fx[i : i + batch_size], fy[i : i + batch_size]).data for i in range(0, len(fx), batch_size)]
        return np.concatenate(parts) if parts else np.zeros_like(fx)


# ---------------------------------------------------------------- checkpoint


def _net_blob(net: LasoOperatorNet) -> list[tuple[str, np.ndarray]]:
    items = []
    for i, b in enumerate(net.blocks):
        items += [
            (f"block{i}.weight", b.weight.data),
            (f"block{i}.bias", b.bias.data),
            (f"block{i}.gamma", b.gamma.data),
            (f"block{i}.beta", b.beta.data),
            (f"block{i}.running_mean", b.stats.running_mean),
            (f"block{i}.running_var", b.stats.running_var),
            (f"block{i}.dropout", np.array(b.dropout)),
            (f"block{i}.slope", np.array(b.slope)),
            (f"block{i}.bn_momentum", np.array(b.stats.momentum)),
            (f"block{i}.bn_eps", np.array(b.stats.eps)),
            (f"block{i}.activation", np.array(_ACTS.index(b.activation), dtype=float)),
        ]
    return items


_ACTS = ("leaky_relu", "relu", "identity")


def _net_from_blob(t: dict[str, np.ndarray]) -> LasoOperatorNet:
    blocks = []
    i = 0
    try:
        while f"block{i}.weight" in t:
            p = f"block{i}."
            stats = ad.BatchNormStats(
                t[p + "running_mean"], t[p + "running_var"], float(t[p + "bn_momentum"]), float(t[p + "bn_eps"])
            )
            blocks.append(
                MlpBlock(
                    Tensor(t[p + "weight"], requires_grad=True),
                    Tensor(t[p + "bias"], requires_grad=True),
                    Tensor(t[p + "gamma"], requires_grad=True),
                    Tensor(t[p + "beta"], requires_grad=True),
                    stats,
                    activation=_ACTS[int(t[p + "activation"])],
                    dropout=float(t[p + "dropout"]),
                    slope=float(t[p + "slope"]),
                )
            )
            i += 1
        return LasoOperatorNet(blocks)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise binio.FileFormatError(f"checkpoint: malformed operator blob ({exc})") from exc


def checkpoint_bytes(model: LasoModel) -> bytes:
    blobs = [_net_blob(model.m_int), _net_blob(model.m_uni), _net_blob(model.m_sub)]
    blobs.append([("weight", model.classifier.weight.data), ("bias", model.classifier.bias.data)])
    parts = [CHECKPOINT_MAGIC, binio.pack("IQQ", CHECKPOINT_VERSION, model.dim, model.n_labels)]
    for blob in blobs:
        parts.append(binio.pack("I", len(blob)))
        parts += [binio.pack_named_tensor(name, arr) for name, arr in blob]
    return b"".join(parts)


def save_checkpoint(model: LasoModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(buf: bytes, what: str = "checkpoint") -> LasoModel:
    r = binio.Reader(buf, what)
    r.magic(CHECKPOINT_MAGIC)
    version = r.unpack("I")
    if version != CHECKPOINT_VERSION:
        raise binio.UnsupportedVersionError(f"{what}: format version {version}, this reader supports {CHECKPOINT_VERSION}")
    d, n_labels = r.unpack("QQ")
    blobs = []
    for _ in range(4):
        count = r.unpack("I")
        blob = {}
        for _ in range(count):
            name, arr = binio.read_named_tensor(r)
            blob[name] = arr
        blobs.append(blob)
    if not r.at_end():
        raise binio.FileFormatError(f"{what}: {len(r.buf) - r.pos} trailing bytes")
    nets = [_net_from_blob(b) for b in blobs[:3]]
    try:
        clf = LinearClassifier(Tensor(blobs[3]["weight"], requires_grad=True), Tensor(blobs[3]["bias"], requires_grad=True))
    except KeyError as exc:
        raise binio.FileFormatError(f"{what}: classifier blob lacks {exc}") from exc
    model = LasoModel(*nets, clf)
    if model.dim != d or model.n_labels != n_labels or any(n.dim != d for n in nets):
        raise binio.FileFormatError(f"{what}: header says d={d}, L={n_labels}; tensors disagree")
    return model


def load_checkpoint(path: Union[str, Path]) -> LasoModel:
    return checkpoint_from_bytes(Path(path).read_bytes(), what=str(path))


# ---------------------------------------------------------------- set expressions


@dataclass
class SetExpr:
    """Binary expression tree; a leaf has ``op is None`` and a ``ref``."""

    op: Optional[str] = None
    left: Optional["SetExpr"] = None
    right: Optional["SetExpr"] = None
    ref: Optional[str] = None
    method: str = "learned"

    def __post_init__(self):
        if self.op is None:
            if self.ref is None or self.left is not None or self.right is not None:
                raise ValueError("a leaf needs a reference and no children")
        else:
            if self.op not in OPS:
                raise ValueError(f"unknown operation {self.op!r}")
            if self.left is None or self.right is None:
                raise ValueError(f"{self.op} node needs exactly two children")
            if self.method not in ("learned", "analytic"):
                raise ValueError(f"node method must be 'learned' or 'analytic', got {self.method!r}")

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def leaves(self) -> list[str]:
        if self.is_leaf:
            return [self.ref]
        return self.left.leaves() + self.right.leaves()

    def __str__(self) -> str:
        if self.is_leaf:
            return self.ref
        return f"{self.op}({self.left},{self.right})"


class ExprSyntaxError(ValueError):
    pass


_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z0-9_.\-]+)|(?P<punct>[(),]))")


def parse_expression(text: str, method: str = "learned") -> SetExpr:
    """Parse ``uni(a,b) | int(a,b) | sub(a,b) | <sample-id>``."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character at position {pos}: {text[pos:]!r}")
        tokens.append(m.group("name") or m.group("punct"))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    if not tokens:
        raise ExprSyntaxError("empty expression")

    def parse(i: int) -> tuple[SetExpr, int]:
        if i >= len(tokens):
            raise ExprSyntaxError("unexpected end of expression")
        tok = tokens[i]
        if tok in "(),":
            raise ExprSyntaxError(f"unexpected {tok!r}")
        if i + 1 < len(tokens) and tokens[i + 1] == "(":
            if tok not in OPS:
                raise ExprSyntaxError(f"unknown operation {tok!r}; expected uni, int or sub")
            left, j = parse(i + 2)
            if j >= len(tokens) or tokens[j] != ",":
                raise ExprSyntaxError(f"expected ',' in {tok}(...)")
            right, j = parse(j + 1)
            if j >= len(tokens) or tokens[j] != ")":
                raise ExprSyntaxError(f"expected ')' to close {tok}(...)")
            return SetExpr(tok, left, right, method=method), j + 1
        return SetExpr(ref=tok), i + 1

    expr, end = parse(0)
    if end != len(tokens):
        raise ExprSyntaxError(f"trailing tokens: {' '.join(tokens[end:])}")
    return expr


def compose_expression(
    expr: SetExpr,
    bank,
    model: Optional[LasoModel] = None,
    bindings: Optional[dict[str, int]] = None,
    variant: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``expr`` bottom-up on bank samples.

    Leaves are integer sample indices or names resolved through
    ``bindings``. Returns the synthesized feature vector and the label set
    the same expression yields under exact set algebra.
    """
    bindings = bindings or {}

    def resolve(ref: str) -> int:
        if ref in bindings:
            idx = bindings[ref]
        elif re.fullmatch(r"\d+", ref):
            idx = int(ref)
        else:
            raise KeyError(f"unresolved leaf {ref!r}")
        if not 0 <= idx < bank.n:
            raise KeyError(f"leaf {ref!r} -> sample {idx} is outside the bank (N={bank.n})")
        return idx

    def ev(node: SetExpr) -> tuple[np.ndarray, np.ndarray]:
        if node.is_leaf:
            i = resolve(node.ref)
            return bank.features[i].astype(float), bank.labels[i].astype(np.uint8)
        fa, la = ev(node.left)
        fb, lb = ev(node.right)
        if node.method == "analytic":
            f = analytic_op(node.op, variant, fa, fb)
        else:
            if model is None:
                raise ValueError(f"node {node} is learned but no model was given")
            f = model.apply(node.op, fa, fb)
        return f, apply_set_op(node.op, la, lb)

    return ev(expr)
