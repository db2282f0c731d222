import numpy as np
import pytest

from laso.labels import set_union
from laso.losses import LossWeights
from laso.nets import classify
from laso.synth import GeneratorSpec, generate_bank, oracle_decode
from laso.training import (
    PairSampler,
    TrainConfig,
    TrainingDivergedError,
    checksum,
    fit_linear_classifier,
    pretrain_classifier,
    train_laso,
)

SMALL = TrainConfig(epochs=2, pretrain_epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def small_bank():
    return generate_bank(GeneratorSpec(), 160, seed=0)


def test_config_round_trip():
    cfg = TrainConfig(epochs=3, loss_weights=LossWeights(1, 0, 2), overlap_pairs=0.2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})


def test_decoupling_checksums(small_bank):
    cfg = TrainConfig(epochs=2, pretrain_epochs=1, verify_decoupling=True)
    _, log = train_laso(small_bank, cfg)
    assert log.classifier_steps == log.operator_steps > 0
    assert log.classifier_changed_by_operator_steps == 0
    assert log.operators_changed_by_classifier_steps == 0


def test_training_is_deterministic(small_bank):
    m1, l1 = train_laso(small_bank, SMALL)
    m2, l2 = train_laso(small_bank, SMALL)
    assert l1.checksums == l2.checksums
    assert l1.to_csv() == l2.to_csv()
    _, l3 = train_laso(small_bank, TrainConfig(epochs=2, pretrain_epochs=2, seed=1))
    assert l3.checksums != l1.checksums


def test_loss_log_columns(small_bank):
    _, log = train_laso(small_bank, SMALL)
    lines = log.to_csv().splitlines()
    assert lines[0] == "epoch,classifier_loss,laso,sym,mc,total,lr,classifier_lr"
    assert len(lines) == 3


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_raises_with_diagnostic(small_bank):
    cfg = TrainConfig(epochs=1, pretrain_epochs=1, loss_weights=LossWeights(laso=1e308))
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train_laso(small_bank, cfg)


@pytest.mark.parametrize("seed", range(5))
def test_total_loss_decreases(seed):
    bank = generate_bank(GeneratorSpec(), 300, seed=seed)
    _, log = train_laso(bank, TrainConfig(epochs=5, pretrain_epochs=3, seed=seed))
    assert log.epochs[-1]["total"] < log.epochs[0]["total"]


def test_pair_sampler_overlap_one_shares_a_label():
    labels = np.zeros((40, 6), dtype=np.uint8)
    rng = np.random.default_rng(0)
    for i in range(40):
        labels[i, rng.choice(6, rng.integers(1, 3), replace=False)] = 1
    s = PairSampler(labels, overlap=1.0)
    anchors = np.arange(40)
    partners = s.partners(anchors, np.random.default_rng(1))
    assert np.all((labels[anchors] & labels[partners]).any(axis=1))


def test_pair_sampler_uniform_range():
    s = PairSampler(np.eye(5, dtype=np.uint8), overlap=0.0)
    p = s.partners(np.arange(5), np.random.default_rng(0))
    assert p.min() >= 0 and p.max() < 5


def test_masked_labels_keep_their_init():
    rng = np.random.default_rng(0)
    f = rng.random((50, 4))
    y = rng.integers(0, 2, (50, 3))
    w = np.array([1.0, 0.0, 1.0])
    c0 = fit_linear_classifier(f, y, w, epochs=0, seed=3)
    c = fit_linear_classifier(f, y, w, epochs=3, seed=3)
    np.testing.assert_array_equal(c.weight.data[1], c0.weight.data[1])
    assert not np.array_equal(c.weight.data[0], c0.weight.data[0])


def test_pretrained_classifier_separates_seen_labels(small_bank):
    clf = pretrain_classifier(small_bank, TrainConfig(pretrain_epochs=20, classifier_lr=1e-2))
    idx = small_bank.indices("train")
    s = classify(clf, small_bank.features64(idx))
    acc = ((s > 0) == small_bank.labels[idx].astype(bool))[:, small_bank.seen_mask].mean()
    assert acc > 0.9


def test_checksum_sensitive_to_any_bit(small_bank):
    m, _ = train_laso(small_bank, SMALL)
    params = m.operator_parameters()
    before = checksum(params)
    name = sorted(params)[0]
    params[name].data.flat[0] = np.nextafter(params[name].data.flat[0], np.inf)
    assert checksum(params) != before


# a model trained on clean disjoint-block data


def test_learned_union_covers_union_labels(clean_trained):
    spec, bank, model = clean_trained
    te = bank.indices("test")
    rng = np.random.default_rng(1)
    a, b = rng.choice(te, 500), rng.choice(te, 500)
    z = model.apply("uni", bank.features64(a), bank.features64(b))
    decoded = oracle_decode(spec, z).astype(bool)
    target = set_union(bank.labels[a], bank.labels[b]).astype(bool)
    m = bank.seen_mask
    assert np.mean(np.all(decoded[:, m] >= target[:, m], axis=1)) >= 0.9


def test_self_intersection_keeps_labels(clean_trained):
    _, bank, model = clean_trained
    te = bank.indices("test")[:300]
    f = bank.features64(te)
    pos = classify(model.classifier, model.apply("int", f, f)) > 0
    m = bank.seen_mask
    assert np.mean(np.all(pos[:, m] == bank.labels[te][:, m].astype(bool), axis=1)) > 0.5
