"""Evaluation and model-surgery tests."""

import numpy as np
import pytest

from fedplas import metrics, nn
from fedplas.attacks import AttackSpec, make_backdoor_testset
from fedplas.data import Dataset, synth_generate


def constant_predictor(num_classes, winner, input_dim=4):
    """Model whose logits are a fixed one-hot favouring ``winner``."""
    w0 = np.zeros((input_dim, nn.MLP_HIDDEN))
    b0 = np.zeros(nn.MLP_HIDDEN)
    w1 = np.zeros((nn.MLP_HIDDEN, num_classes))
    b1 = np.zeros(num_classes)
    b1[winner] = 10.0
    layers = [
        nn.Layer(0, "dense", (w0,)),
        nn.Layer(1, "bias", (b0,)),
        nn.Layer(2, "dense", (w1,)),
        nn.Layer(3, "bias", (b1,)),
    ]
    return nn.LayeredModel("mlp-2", num_classes, (input_dim,), layers)


def test_constant_target_predictor_has_full_ba_and_target_share_ma():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(50, 1, 2, 2))
    labels = np.concatenate([np.zeros(10, dtype=int), rng.integers(1, 4, size=40)])
    clean = Dataset(images, labels, "clean", 4)
    attack = AttackSpec(kind="trigger", target_label=0, poison_fraction=0.3)
    bd = make_backdoor_testset(clean, attack)
    model = constant_predictor(4, winner=0)
    report = metrics.evaluate(model, clean, bd)
    assert report.ba == 1.0
    assert report.ma == pytest.approx(10 / 50)


def test_random_labels_give_chance_level_ma():
    rng = np.random.default_rng(1)
    images = rng.uniform(size=(1000, 1, 2, 2))
    labels = rng.integers(0, 10, size=1000)
    ds = Dataset(images, labels, "chance", 10)
    model = constant_predictor(10, winner=3)
    report = metrics.evaluate(model, ds, None)
    assert abs(report.ma - 0.1) <= 0.03


def test_evaluate_matches_hand_counted_four_samples():
    # logits equal the (flattened) input via identity weights: prediction is
    # the argmax pixel; count correct labels by hand
    layers = [
        nn.Layer(0, "dense", (np.eye(3),)),
        nn.Layer(1, "bias", (np.zeros(3),)),
        nn.Layer(2, "dense", (np.eye(3),)),
        nn.Layer(3, "bias", (np.zeros(3),)),
    ]
    model = nn.LayeredModel("mlp-2", 3, (3,), layers)
    images = np.array(
        [
            [0.9, 0.1, 0.0],  # pred 0
            [0.0, 0.8, 0.1],  # pred 1
            [0.2, 0.1, 0.7],  # pred 2
            [0.5, 0.4, 0.0],  # pred 0
        ]
    ).reshape(4, 1, 1, 3)
    clean = Dataset(images, np.array([0, 1, 0, 1]), "hand", 3)  # correct: 1st, 2nd
    backdoor = Dataset(images, np.array([2, 2, 2, 2]), "hand-bd", 3)  # hit: 3rd
    report = metrics.evaluate(model, clean, backdoor)
    assert report.ma == pytest.approx(2 / 4)
    assert report.ba == pytest.approx(1 / 4)


def test_evaluate_per_client_splits_benign_and_malicious():
    rng = np.random.default_rng(2)
    images = rng.uniform(size=(40, 1, 2, 2))
    clean = Dataset(images, rng.integers(0, 4, size=40), "clean", 4)
    bd = Dataset(images, np.zeros(40, dtype=int), "bd", 4)
    always0 = constant_predictor(4, winner=0)
    always1 = constant_predictor(4, winner=1)
    report = metrics.evaluate(
        [(0, always1, False), (1, always0, True), (2, always1, False)], clean, bd
    )
    # benign mean BA: always1 predicts 1, never the target 0
    assert report.ba == 0.0
    assert report.ba_atk == 1.0
    assert set(report.per_client_ma) == {0, 1, 2}


def test_evaluate_does_not_mutate_models():
    model = nn.build_arch("mlp-2", 4, (1, 8, 8), seed=0)
    before = nn.flatten_model(model)
    ds = synth_generate(4, 10, 8, seed=0)
    metrics.evaluate(model, ds, None)
    assert np.array_equal(nn.flatten_model(model), before)


def test_evaluate_requires_benign_clients_and_nonempty_test():
    model = constant_predictor(4, winner=0, input_dim=64)
    ds = synth_generate(4, 5, 8, seed=1)
    with pytest.raises(ValueError, match="benign"):
        metrics.evaluate([(0, model, True)], ds, None)


def test_model_surgery_self_is_identity():
    model = nn.build_arch("lenet-s", 5, (1, 16, 16), seed=1)
    out = metrics.model_surgery(model, model, 4)
    assert np.array_equal(nn.flatten_model(out), nn.flatten_model(model))


def test_model_surgery_takes_layers_from_each_donor():
    a = nn.build_arch("mlp-2", 4, 6, seed=1)
    b = nn.build_arch("mlp-2", 4, 6, seed=2)
    out = metrics.model_surgery(a, b, 2)
    assert np.array_equal(out.array(0), a.array(0))
    assert np.array_equal(out.array(1), a.array(1))
    assert np.array_equal(out.array(2), b.array(2))
    assert np.array_equal(out.array(3), b.array(3))


def test_model_surgery_rejects_incongruent_models():
    a = nn.build_arch("mlp-2", 4, 6, seed=1)
    b = nn.build_arch("mlp-2", 5, 6, seed=1)
    with pytest.raises(nn.ShapeError):
        metrics.model_surgery(a, b, 2)


def test_train_central_aborts_on_divergence():
    # logits must overflow to inf within a few steps for the guard to trip;
    # softmax keeps per-step gradients bounded, so the rate needs to be huge
    ds = synth_generate(4, 30, 8, seed=3)
    model = nn.build_arch("mlp-2", 4, (1, 8, 8), seed=3)
    cfg = nn.TrainingConfig(learning_rate=1e120, momentum=0.0, seed=3)
    with np.errstate(all="ignore"):
        with pytest.raises(RuntimeError, match="diverged"):
            metrics.train_central(model, ds, cfg, epochs=3, shuffle_seed=3)
