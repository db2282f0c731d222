"""Central finite-difference checks of every primitive and loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from laso import autodiff as ad
from laso import losses
from laso.autodiff import Tape, Tensor
from laso.nets import LasoOperatorNet, LinearClassifier

H = 1e-5
TOL = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_error: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.rel_error < TOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check(
    build: Callable[[], Tensor],
    leaves: list[Tensor],
    rng: np.random.Generator,
    max_coords: int = 40,
    h: float = H,
) -> tuple[float, int]:
    """Compare reverse-mode gradients of ``build()`` with central differences.

    ``build`` must recompute the scalar loss from the current leaf values.
    At most ``max_coords`` randomly chosen coordinates are perturbed per leaf.
    """
    ad.zero_grads(leaves)
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic, numeric = [], []
    for leaf in leaves:
        g = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            down = build().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(g.reshape(-1)[i])
    ad.zero_grads(leaves)
    return rel_error(np.array(analytic), np.array(numeric)), len(analytic)


def _leaf(x) -> Tensor:
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def _away_from(x: np.ndarray, at: float = 0.0) -> np.ndarray:
    # push entries out of a band around a kink
    close = np.abs(x - at) < KINK_MARGIN
    return np.where(close, at + np.sign(x - at + 1e-300) * KINK_MARGIN * 10, x)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda t: ad.reduce_sum(ad.mul(t, r))


def _shape(rng, max_side=8) -> tuple[int, int]:
    return int(rng.integers(2, max_side + 1)), int(rng.integers(2, max_side + 1))


# ------------------------------------------------------------------ primitive cases
# each returns (build, leaves)


def _unary(fn, domain="any"):
    def case(rng):
        x = rng.normal(size=_shape(rng))
        if domain == "positive":
            x = np.abs(x) + 0.1
        elif domain == "kink0":
            x = _away_from(x)
        leaf = _leaf(x)
        proj = _project(fn(leaf), rng)
        return (lambda: proj(fn(leaf))), [leaf]

    return case


def _binary(fn, kink=False):
    def case(rng):
        s = _shape(rng)
        a, b = rng.normal(size=s), rng.normal(size=s)
        if kink:
            b = a + _away_from(b - a)
        la, lb = _leaf(a), _leaf(b)
        proj = _project(fn(la, lb), rng)
        return (lambda: proj(fn(la, lb))), [la, lb]

    return case


def _case_matmul(rng):
    n, k = _shape(rng)
    m = int(rng.integers(2, 9))
    t = bool(rng.integers(2))
    a = _leaf(rng.normal(size=(n, k)))
    b = _leaf(rng.normal(size=(m, k) if t else (k, m)))
    fn = lambda: ad.matmul(a, b, transpose_b=t)
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [a, b]


def _case_add_bias(rng):
    s = _shape(rng)
    x, b = _leaf(rng.normal(size=s)), _leaf(rng.normal(size=s[1]))
    proj = _project(ad.add_bias(x, b), rng)
    return (lambda: proj(ad.add_bias(x, b))), [x, b]


def _case_concat(rng):
    n, k = _shape(rng)
    a, b = _leaf(rng.normal(size=(n, k))), _leaf(rng.normal(size=(n, int(rng.integers(1, 9)))))
    proj = _project(ad.concat_lastdim(a, b), rng)
    return (lambda: proj(ad.concat_lastdim(a, b))), [a, b]


def _case_reduce(kind):
    def case(rng):
        x = _leaf(rng.normal(size=_shape(rng)))
        axis = [None, 0, 1, -1][int(rng.integers(4))]
        fn = (lambda: ad.reduce_sum(x, axis)) if kind == "sum" else (lambda: ad.reduce_mean(x, axis))
        proj = _project(fn(), rng)
        return (lambda: proj(fn())), [x]

    return case


def _case_bce(rng):
    s = _shape(rng)
    scores = _leaf(rng.normal(scale=3.0, size=s))
    targets = rng.random(s) if rng.integers(2) else (rng.random(s) < 0.5).astype(float)
    weights = (rng.random(s[1]) < 0.7).astype(float) if rng.integers(2) else None
    proj = _project(ad.bce_with_logits(scores, targets, weights), rng)
    return (lambda: proj(ad.bce_with_logits(scores, targets, weights))), [scores]


def _case_batch_norm(train):
    def case(rng):
        n, k = _shape(rng)
        x = _leaf(rng.normal(loc=1.0, scale=2.0, size=(n, k)))
        gamma, beta = _leaf(rng.normal(size=k)), _leaf(rng.normal(size=k))
        stats = ad.BatchNormStats.fresh(k)
        stats.running_mean[:] = rng.normal(size=k)
        stats.running_var[:] = rng.random(k) + 0.5

        def fn():
            # keep running stats fixed across repeated evaluations
            s = ad.BatchNormStats(stats.running_mean.copy(), stats.running_var.copy(), stats.momentum, stats.eps)
            return ad.batch_norm(x, gamma, beta, s, train)

        proj = _project(fn(), rng)
        return (lambda: proj(fn())), [x, gamma, beta]

    return case


def _case_dropout(rng):
    s = _shape(rng)
    x = _leaf(rng.normal(size=s))
    rate = float(rng.uniform(0.1, 0.6))
    mask = ad.dropout_mask(s, rate, rng)
    fn = lambda: ad.dropout(x, rate, True, mask=mask)
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [x]


def _case_scale(rng):
    x = _leaf(rng.normal(size=_shape(rng)))
    c = float(rng.normal())
    proj = _project(ad.scale(x, c), rng)
    return (lambda: proj(ad.scale(x, c))), [x]


PRIMITIVES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "add_bias": _case_add_bias,
    "concat_lastdim": _case_concat,
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scale": _case_scale,
    "max": _binary(ad.maximum, kink=True),
    "min": _binary(ad.minimum, kink=True),
    "relu": _unary(ad.relu, "kink0"),
    "leaky_relu": _unary(lambda t: ad.leaky_relu(t, 0.01), "kink0"),
    "sigmoid": _unary(ad.sigmoid),
    "log": _unary(ad.log, "positive"),
    "square": _unary(ad.square),
    "row_norm": _unary(ad.row_norm),
    "bce_with_logits": _case_bce,
    "reduce_sum": _case_reduce("sum"),
    "reduce_mean": _case_reduce("mean"),
    "batch_norm_train": _case_batch_norm(True),
    "batch_norm_eval": _case_batch_norm(False),
    "dropout": _case_dropout,
}


# ------------------------------------------------------------------ random composed graphs

_SMOOTH_UNARY = [ad.sigmoid, ad.square, lambda t: ad.scale(t, 0.7)]
_SMOOTH_BINARY = [ad.add, ad.sub, ad.mul]
_KINK_UNARY = [ad.relu, lambda t: ad.leaky_relu(t, 0.01)]
_KINK_BINARY = [ad.maximum, ad.minimum]


def _case_composed(rng):
    """A random chain of up to 5 ops over a few same-shape leaves.

    Kinked ops are only kept where their inputs sit at least KINK_MARGIN
    from the kink; otherwise a smooth op is substituted.
    """
    s = _shape(rng)
    leaves = [_leaf(rng.normal(size=s)) for _ in range(int(rng.integers(1, 4)))]
    plan = []
    for _ in range(int(rng.integers(1, 6))):
        binary = bool(rng.integers(2))
        kinked = rng.random() < 0.4
        plan.append((binary, kinked, int(rng.integers(100)), int(rng.integers(100))))

    def run(check_margins: bool):
        vals = list(leaves)
        cur = vals[0]
        chosen = []
        for step, (binary, kinked, pick, other) in enumerate(plan):
            if binary:
                rhs = vals[other % len(vals)]
                if kinked and (not check_margins or np.min(np.abs(cur.data - rhs.data)) > KINK_MARGIN):
                    op = _KINK_BINARY[pick % 2]
                else:
                    op = _SMOOTH_BINARY[pick % 3]
                cur = op(cur, rhs)
            else:
                if kinked and (not check_margins or np.min(np.abs(cur.data)) > KINK_MARGIN):
                    op = _KINK_UNARY[pick % 2]
                else:
                    op = _SMOOTH_UNARY[pick % 3]
                cur = op(cur)
            chosen.append(op)
            vals.append(cur)
        return cur, chosen

    _, ops = run(check_margins=True)

    def fixed():
        vals = list(leaves)
        cur = vals[0]
        for (binary, _, _, other), op in zip(plan, ops):
            cur = op(cur, vals[other % len(vals)]) if binary else op(cur)
            vals.append(cur)
        return cur

    proj = _project(fixed(), rng)
    return (lambda: proj(fixed())), leaves


# ------------------------------------------------------------------ loss cases


def _small_setup(rng, d=4, n_labels=3, batch=5):
    nets = [LasoOperatorNet.create(d, rng) for _ in range(3)]
    clf = LinearClassifier.create(n_labels, d, rng)
    fx = np.abs(rng.normal(size=(batch, d)))
    fy = np.abs(rng.normal(size=(batch, d)))
    lx = (rng.random((batch, n_labels)) < 0.5).astype(float)
    ly = (rng.random((batch, n_labels)) < 0.5).astype(float)
    w = (rng.random(n_labels) < 0.8).astype(float)
    return nets, clf, fx, fy, lx, ly, w


def _frozen_stats(nets):
    snap = [[(b.stats.running_mean.copy(), b.stats.running_var.copy()) for b in n.blocks] for n in nets]

    def restore():
        for n, s in zip(nets, snap):
            for b, (m, v) in zip(n.blocks, s):
                b.stats.running_mean[:] = m
                b.stats.running_var[:] = v

    return restore


def _net_leaves(*nets) -> list[Tensor]:
    return [p for n in nets for p in n.parameters().values()]


def _case_loss_bce(rng):
    s = _shape(rng)
    scores = _leaf(rng.normal(size=s))
    l = rng.random(s)
    return (lambda: losses.bce(scores, l)), [scores]


def _case_classifier_loss(rng):
    _, clf, fx, fy, lx, ly, w = _small_setup(rng)
    leaves = list(clf.parameters().values())
    return (lambda: losses.classifier_loss(clf, fx, fy, lx, ly, w)), leaves


def _case_laso_loss(rng):
    (mi, mu, ms), clf, fx, fy, lx, ly, w = _small_setup(rng)
    masks = [n.sample_masks(len(fx), rng) for n in (mi, mu, ms)]
    restore = _frozen_stats([mi, mu, ms])
    tx, ty = Tensor(fx), Tensor(fy)

    def build():
        restore()
        z = [n(tx, ty, train=True, masks=m) for n, m in zip((mi, mu, ms), masks)]
        return losses.laso_loss(clf, *z, lx, ly, w)

    return build, _net_leaves(mi, mu, ms)


def _case_sym_loss(rng):
    (mi, mu, _), _, fx, fy, *_ = _small_setup(rng)
    masks = [n.sample_masks(len(fx), rng) for n in (mi, mu)]
    restore = _frozen_stats([mi, mu])
    squared = bool(rng.integers(2))
    tx, ty = _leaf(fx), _leaf(fy)

    def build():
        restore()
        total = None
        for n, m in zip((mi, mu), masks):
            term = losses.pair_distance(n(tx, ty, train=True, masks=m), n(ty, tx, train=True, masks=m), squared)
            total = term if total is None else ad.add(total, term)
        return total

    return build, _net_leaves(mi, mu) + [tx, ty]


def _case_mc_loss(rng):
    (mi, mu, ms), _, fx, fy, *_ = _small_setup(rng)
    restore = _frozen_stats([mi, mu, ms])
    tx, ty = _leaf(fx), _leaf(fy)

    def build():
        restore()
        z_int, z_sub = mi(tx, ty), ms(tx, ty)
        return losses.mc_loss(mu, ms, tx, ty, z_int, z_sub)

    return build, _net_leaves(mi, mu, ms) + [tx, ty]


def _case_total_objective(rng):
    (mi, mu, ms), clf, fx, fy, lx, ly, w = _small_setup(rng)
    weights = losses.LossWeights(*rng.uniform(0.1, 2.0, size=3))
    masks = [n.sample_masks(len(fx), rng) for n in (mi, mu, ms)]
    sub_rev_mask = ms.sample_masks(len(fx), rng)
    uni_mc_masks = [mu.sample_masks(len(fx), rng) for _ in range(2)]
    restore = _frozen_stats([mi, mu, ms])
    tx, ty = Tensor(fx), Tensor(fy)

    def build():
        restore()
        zi, zu, zs = (n(tx, ty, train=True, masks=m) for n, m in zip((mi, mu, ms), masks))
        zi2 = mi(ty, tx, train=True, masks=masks[0])
        zu2 = mu(ty, tx, train=True, masks=masks[1])
        la = losses.laso_loss(clf, zi, zu, zs, lx, ly, w)
        sy = ad.add(losses.pair_distance(zi, zi2), losses.pair_distance(zu, zu2))
        rx = mu(zs, zi, train=True, masks=uni_mc_masks[0])
        ry = mu(ms(ty, tx, train=True, masks=sub_rev_mask), zi, train=True, masks=uni_mc_masks[1])
        mc = ad.add(losses.pair_distance(tx, rx, True), losses.pair_distance(ty, ry, True))
        return losses.total_laso_objective(weights, la, sy, mc)

    return build, _net_leaves(mi, mu, ms)


LOSSES: dict[str, Callable] = {
    "bce": _case_loss_bce,
    "classifier_loss": _case_classifier_loss,
    "laso_loss": _case_laso_loss,
    "sym_loss": _case_sym_loss,
    "mc_loss": _case_mc_loss,
    "total_objective": _case_total_objective,
}


@dataclass
class SuiteReport:
    results: list
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.rel_error)


def run_suite(seeds_per_primitive: int = 4, composed: int = 40, seeds_per_loss: int = 4, seed: int = 0) -> SuiteReport:
    """Check every primitive, random composed graphs and every loss."""
    t0 = time.perf_counter()
    results = []
    cases = [(n, c, seeds_per_primitive) for n, c in PRIMITIVES.items()]
    cases.append(("composed", _case_composed, composed))
    cases += [(n, c, seeds_per_loss) for n, c in LOSSES.items()]
    for ci, (name, case, count) in enumerate(cases):
        for s in range(count):
            rng = np.random.default_rng([seed, ci, s])
            build, leaves = case(rng)
            err, n = check(build, leaves, rng)
            results.append(CheckResult(name, s, err, n))
    return SuiteReport(results, time.perf_counter() - t0)
