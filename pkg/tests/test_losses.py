import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laso import autodiff as ad
from laso.autodiff import Tape, Tensor
from laso.losses import (
    LossWeights,
    bce,
    classifier_loss,
    laso_loss,
    mc_loss,
    pair_distance,
    sym_loss,
    total_laso_objective,
)
from laso.nets import AnalyticOperator, LasoModel, LinearClassifier
from laso.synth import GeneratorSpec, generate_bank


def bce_ref(s, l):
    # direct formula evaluated with 50 significant digits
    with localcontext() as ctx:
        ctx.prec = 50
        total = Decimal(0)
        for si, li in zip(s, l):
            p = 1 / (1 + (-Decimal(float(si))).exp())
            li = Decimal(float(li))
            total -= li * p.ln() + (1 - li) * (1 - p).ln()
        return float(total)


def test_bce_examples():
    assert bce([0.0, 0.0], [1, 0]).data == pytest.approx(2 * math.log(2), rel=1e-12)
    assert bce([10.0], [1]).data == pytest.approx(4.5398899216870535e-05, rel=1e-9)
    assert bce([0.0], [0.5]).data == pytest.approx(math.log(2), rel=1e-12)


@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(0, 1)), min_size=1, max_size=6))
def test_bce_matches_direct_formula(pairs):
    s, l = zip(*pairs)
    assert bce(list(s), list(l)).data == pytest.approx(bce_ref(s, l), rel=1e-9, abs=1e-12)


def test_bce_length_mismatch():
    with pytest.raises(ad.ShapeError):
        bce([0.0, 1.0], [1, 0, 1])


def test_bce_decreases_toward_positive_infinity():
    vals = [float(bce([s], [1]).data) for s in np.linspace(-5, 30, 50)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert all(v >= 0 for v in vals)


def test_bce_batch_is_mean_of_rows():
    s = np.array([[0.0, 1.0], [2.0, -1.0]])
    l = np.array([[1, 0], [0, 1]])
    assert float(bce(s, l).data) == pytest.approx((bce_ref(s[0], l[0]) + bce_ref(s[1], l[1])) / 2)


def test_bce_extreme_scores_finite():
    out = bce([1e4, -1e4], [0, 1]).data
    assert np.isfinite(out) and out == pytest.approx(2e4)


def test_classifier_loss_identical_pair():
    rng = np.random.default_rng(0)
    c = LinearClassifier.create(5, 4, rng)
    f = rng.random((3, 4))
    l = rng.integers(0, 2, (3, 5))
    single = float(bce(c.scores(Tensor(f)), l).data)
    assert float(classifier_loss(c, f, f, l, l).data) == pytest.approx(2 * single)


def test_classifier_loss_zero_classifier():
    c = LinearClassifier.zeros(6, 4)
    val = classifier_loss(c, np.ones(4), np.zeros(4), np.eye(6)[1], np.eye(6)[2]).data
    assert float(val) == pytest.approx(12 * math.log(2))


def test_classifier_loss_no_gradient_to_features():
    c = LinearClassifier.create(3, 2, np.random.default_rng(1))
    fx = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = classifier_loss(c, fx, fx, np.ones((2, 3)), np.zeros((2, 3)))
    tape.backward(loss)
    assert fx.grad is None or not np.any(fx.grad)
    assert np.any(c.weight.grad)


def _sigmoid_targets(c, z, target):
    return float(bce(c.scores(Tensor(z)), target).data)


def test_laso_loss_targets():
    rng = np.random.default_rng(2)
    c = LinearClassifier.create(4, 3, rng)
    z = rng.random((3, 1, 3))
    lx = np.array([[1, 1, 0, 0]])
    # identical labels: int and uni targets equal lx, sub target empty
    expect = _sigmoid_targets(c, z[0], lx) + _sigmoid_targets(c, z[1], lx) + _sigmoid_targets(c, z[2], np.zeros((1, 4)))
    assert float(laso_loss(c, *z, lx, lx).data) == pytest.approx(expect)
    ly = np.array([[0, 0, 1, 0]])
    expect = (
        _sigmoid_targets(c, z[0], np.zeros((1, 4)))
        + _sigmoid_targets(c, z[1], lx | ly)
        + _sigmoid_targets(c, z[2], lx)
    )
    assert float(laso_loss(c, *z, lx, ly).data) == pytest.approx(expect)


def test_laso_loss_keeps_classifier_frozen():
    rng = np.random.default_rng(3)
    c = LinearClassifier.create(4, 3, rng)
    zs = [Tensor(rng.random((2, 3)), requires_grad=True) for _ in range(3)]
    with Tape() as tape:
        loss = laso_loss(c, *zs, np.ones((2, 4)), np.zeros((2, 4)))
    tape.backward(loss)
    assert c.weight.grad is None or not np.any(c.weight.grad)
    assert all(np.any(z.grad) for z in zs)


def test_pair_distance_values():
    a, b = Tensor([[3.0, 4.0]]), Tensor([[0.0, 0.0]])
    assert float(pair_distance(a, b).data) == pytest.approx(5.0 / 2)
    assert float(pair_distance(a, b, squared=True).data) == pytest.approx(25.0 / 2)


@pytest.fixture(scope="module")
def model():
    return LasoModel.create(6, 4, seed=0)


def test_sym_loss_identical_inputs_zero(model):
    x = np.random.default_rng(0).random((4, 6))
    assert float(sym_loss(model.m_int, model.m_uni, x, x).data) == 0.0


def test_sym_loss_symmetric_nets_zero():
    x, y = np.random.default_rng(1).random((2, 5, 6))
    val = sym_loss(AnalyticOperator("int"), AnalyticOperator("uni"), x, y)
    assert float(val.data) == 0.0


def test_sym_loss_swap_invariant(model):
    x, y = np.random.default_rng(2).random((2, 5, 6))
    a = float(sym_loss(model.m_int, model.m_uni, x, y).data)
    b = float(sym_loss(model.m_int, model.m_uni, y, x).data)
    assert a == pytest.approx(b, rel=1e-12) and a > 0


def test_sym_loss_value_by_hand(model):
    x, y = np.random.default_rng(3).random((2, 3, 6))
    expect = 0.0
    for kind in ("int", "uni"):
        diff = model.apply(kind, x, y) - model.apply(kind, y, x)
        expect += np.mean(np.linalg.norm(diff, axis=1) / 6)
    assert float(sym_loss(model.m_int, model.m_uni, x, y).data) == pytest.approx(expect)


def test_mc_loss_zero_for_analytic_on_clean_data():
    spec = GeneratorSpec.clean_blocks()
    bank = generate_bank(spec, 200, seed=0)
    rng = np.random.default_rng(0)
    i, j = rng.integers(0, bank.n, (2, 500))
    fx, fy = bank.features[i].astype(float), bank.features[j].astype(float)
    uni, sub, inter = AnalyticOperator("uni"), AnalyticOperator("sub"), AnalyticOperator("int")
    z_int, z_sub = inter(fx, fy), sub(fx, fy)
    assert float(mc_loss(uni, sub, fx, fy, z_int, z_sub).data) == 0.0


def test_mc_loss_value_by_hand(model):
    x, y = np.random.default_rng(4).random((2, 3, 6))
    z_int, z_sub = model.apply("int", x, y), model.apply("sub", x, y)
    rx = model.apply("uni", z_sub, z_int)
    ry = model.apply("uni", model.apply("sub", y, x), z_int)
    expect = np.mean(np.sum((x - rx) ** 2, axis=1) / 6) + np.mean(np.sum((y - ry) ** 2, axis=1) / 6)
    got = mc_loss(model.m_uni, model.m_sub, x, y, z_int, z_sub).data
    assert float(got) == pytest.approx(expect)


def test_total_objective_weights():
    a, b, c = Tensor(1.5), Tensor(2.0), Tensor(0.25)
    assert float(total_laso_objective(LossWeights(1, 0, 0), a, b, c).data) == 1.5
    assert float(total_laso_objective(LossWeights(0, 0, 0), a, b, c).data) == 0.0
    assert float(total_laso_objective(LossWeights(), a, b, c).data) == 3.75
    assert float(total_laso_objective(LossWeights(2, 0.5, 4), a, b, c).data) == 5.0


@pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(sym=bad)


@pytest.mark.parametrize("seed", range(5))
def test_one_adam_step_does_not_increase_laso_loss(seed):
    rng = np.random.default_rng(seed)
    model = LasoModel.create(8, 5, seed=seed, dropout=0.0)
    fx, fy = rng.random((16, 8)), rng.random((16, 8))
    lx, ly = rng.integers(0, 2, (16, 5)), rng.integers(0, 2, (16, 5))

    def loss_now(train):
        z = [model.net(k)(fx, fy, train=train, rng=rng) for k in ("int", "uni", "sub")]
        return laso_loss(model.classifier, *z, lx, ly)

    # BN in train mode: evaluate twice on the same batch with identical statistics
    params = model.operator_parameters()
    with Tape() as tape:
        before = loss_now(True)
    tape.backward(before)
    grads = {k: p.grad for k, p in params.items()}
    ad.adam_step(ad.AdamState(lr=1e-3), params, grads)
    after = loss_now(True)
    assert float(after.data) <= float(before.data)
