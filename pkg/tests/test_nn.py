"""Engine tests: forward math, loss, gradients vs finite differences, SGD."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedplas import nn


def test_zero_weight_dense_model_gives_zero_logits():
    model = nn.build_arch("mlp-2", 10, 8, seed=0)
    for i in range(model.num_layers):
        model.layers[i] = nn.Layer(i, model.layers[i].kind, (np.zeros_like(model.array(i)),))
    logits = nn.forward(model, np.random.default_rng(0).normal(size=(5, 8)))
    assert np.array_equal(logits, np.zeros((5, 10)))


def test_identity_single_dense_layer_passes_input_through():
    # hand-built 1-layer dense model: weights I, bias 0
    model = nn.LayeredModel(
        "mlp-2",
        4,
        (4,),
        [
            nn.Layer(0, "dense", (np.eye(4),)),
            nn.Layer(1, "bias", (np.zeros(4),)),
            nn.Layer(2, "dense", (np.eye(4),)),
            nn.Layer(3, "bias", (np.zeros(4),)),
        ],
    )
    v = np.array([[0.3, 1.2, 0.0, 2.5]])  # nonnegative so ReLU is a no-op
    assert np.allclose(nn.forward(model, v), v)


def test_two_layer_mlp_matches_hand_evaluated_matrix_products():
    w0 = np.array([[0.2, -0.1], [0.4, 0.3], [-0.5, 0.6]])
    b0 = np.array([0.1, -0.2])
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, 0.25])
    model = nn.LayeredModel(
        "mlp-2",
        2,
        (3,),
        [
            nn.Layer(0, "dense", (w0,)),
            nn.Layer(1, "bias", (b0,)),
            nn.Layer(2, "dense", (w1,)),
            nn.Layer(3, "bias", (b1,)),
        ],
    )
    v = np.array([1.0, 2.0, 0.5])
    # hand evaluation: h = relu(v @ w0 + b0); logits = h @ w1 + b1
    h = np.maximum(v @ w0 + b0, 0.0)
    expected = h @ w1 + b1
    assert np.allclose(nn.forward(model, v[None, :])[0], expected, atol=1e-12)
    assert np.allclose(expected, [1.15, 0.6])  # frozen from the arithmetic above


def test_forward_rejects_bad_input_shape_naming_the_layer():
    model = nn.build_arch("lenet-s", 10, (1, 28, 28), seed=0)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(model, np.zeros((2, 3, 28, 28)))
    mlp = nn.build_arch("mlp-2", 10, 64, seed=0)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(mlp, np.zeros((2, 63)))


def test_uniform_logits_loss_is_log_num_classes():
    for c in (2, 7, 10):
        logits = np.ones((4, c)) * 3.21
        loss, _ = nn.softmax_cross_entropy(logits, np.zeros(4, dtype=np.int64))
        assert abs(loss - math.log(c)) < 1e-9


def test_saturated_correct_logits_loss_is_tiny():
    logits = np.full((3, 10), 0.0)
    logits[np.arange(3), [1, 4, 9]] = 50.0
    loss, _ = nn.softmax_cross_entropy(logits, np.array([1, 4, 9]))
    assert loss < 1e-10


def test_loss_and_gradients_rejects_empty_batch():
    model = nn.build_arch("mlp-2", 10, 8, seed=0)
    with pytest.raises(ValueError, match="empty"):
        nn.loss_and_gradients(model, np.zeros((0, 8)), np.zeros(0, dtype=int))


def test_loss_and_gradients_rejects_out_of_range_labels():
    model = nn.build_arch("mlp-2", 4, 8, seed=0)
    with pytest.raises(ValueError, match="labels"):
        nn.loss_and_gradients(model, np.zeros((2, 8)), np.array([0, 4]))


def _relative_fd_errors(model, x, y, coords_per_kind=110, h=1e-5, seed=123):
    """Central finite differences on the loss for sampled coordinates,
    grouped by layer kind."""
    _, grads = nn.loss_and_gradients(model, x, y)
    rng = np.random.default_rng(seed)
    errors = {}
    for kind in ("dense", "conv2d", "bias"):
        layer_ids = [l.index for l in model.layers if l.kind == kind]
        if not layer_ids:
            continue
        errs = []
        for _ in range(coords_per_kind):
            li = int(rng.choice(layer_ids))
            flat = int(rng.integers(0, model.array(li).size))

            def loss_at(delta):
                probe = nn.clone_model(model)
                probe.layers[li].params[0].ravel()[flat] += delta
                loss, _ = nn.loss_and_gradients(probe, x, y)
                return loss

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            a = grads[li].ravel()[flat]
            errs.append(abs(a - fd) / max(abs(a), abs(fd), 1e-3))
        errors[kind] = max(errs)
    return errors


def test_gradients_match_finite_differences_mlp():
    model = nn.build_arch("mlp-2", 5, 12, seed=7)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 12)) * 0.5
    y = rng.integers(0, 5, size=6)
    errors = _relative_fd_errors(model, x, y)
    assert set(errors) == {"dense", "bias"}
    for kind, err in errors.items():
        assert err <= 1e-4, f"{kind}: {err}"


def test_gradients_match_finite_differences_lenet():
    model = nn.build_arch("lenet-s", 5, (1, 16, 16), seed=7)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 1, 16, 16)) * 0.5
    y = rng.integers(0, 5, size=4)
    errors = _relative_fd_errors(model, x, y)
    assert set(errors) == {"dense", "conv2d", "bias"}
    for kind, err in errors.items():
        assert err <= 1e-4, f"{kind}: {err}"


def test_sgd_step_vanilla_decrease():
    cfg = nn.TrainingConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0,
                            lr_decay_base=1.0)
    model = nn.build_arch("mlp-2", 4, 6, seed=1)
    grads = [np.ones_like(model.array(i)) for i in range(model.num_layers)]
    stepped, _ = nn.sgd_step(model, grads, cfg, nn.zeros_velocity(model), round_t=0)
    for i in range(model.num_layers):
        assert np.allclose(stepped.array(i), model.array(i) - 0.1)


def test_sgd_step_zero_grad_zero_decay_is_fixed_point():
    cfg = nn.TrainingConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.0)
    model = nn.build_arch("mlp-2", 4, 6, seed=1)
    grads = [np.zeros_like(model.array(i)) for i in range(model.num_layers)]
    stepped, vel = nn.sgd_step(model, grads, cfg, nn.zeros_velocity(model), round_t=3)
    for i in range(model.num_layers):
        assert np.array_equal(stepped.array(i), model.array(i))
        assert np.array_equal(vel[i], np.zeros_like(vel[i]))


def _scalar_model(value):
    return nn.LayeredModel(
        "mlp-2", 2, (1,),
        [
            nn.Layer(0, "dense", (np.array([[value]]),)),
            nn.Layer(1, "bias", (np.zeros(1),)),
            nn.Layer(2, "dense", (np.ones((1, 2)),)),
            nn.Layer(3, "bias", (np.zeros(2),)),
        ],
    )


def test_sgd_two_step_momentum_recursion_matches_hand_computation():
    # scalar parameter p=1.0, lr=0.1, momentum=0.9, no decay, no weight decay:
    #   v1 = 0.9*0 + 0.5       = 0.5    p1 = 1.0  - 0.1*0.5 = 0.95
    #   v2 = 0.9*0.5 + (-0.25) = 0.2    p2 = 0.95 - 0.1*0.2 = 0.93
    cfg = nn.TrainingConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0,
                            lr_decay_base=1.0)
    model = _scalar_model(1.0)
    zeros = [np.zeros_like(model.array(i)) for i in range(model.num_layers)]

    def grad_for(g):
        out = [z.copy() for z in zeros]
        out[0] = np.array([[g]])
        return out

    velocity = nn.zeros_velocity(model)
    model, velocity = nn.sgd_step(model, grad_for(0.5), cfg, velocity, round_t=0)
    assert abs(model.array(0)[0, 0] - 0.95) < 1e-12
    model, velocity = nn.sgd_step(model, grad_for(-0.25), cfg, velocity, round_t=0)
    assert abs(model.array(0)[0, 0] - 0.93) < 1e-12
    assert abs(velocity[0][0, 0] - 0.2) < 1e-12


def test_sgd_weight_decay_and_lr_decay_follow_update_order():
    # v = m*v + (g + wd*p); p = p - lr*base**t*v, with t=3
    cfg = nn.TrainingConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.2,
                            lr_decay_base=0.5)
    model = _scalar_model(2.0)
    grads = [np.zeros_like(model.array(i)) for i in range(model.num_layers)]
    grads[0] = np.array([[1.0]])
    stepped, _ = nn.sgd_step(model, grads, cfg, nn.zeros_velocity(model), round_t=3)
    expected = 2.0 - 0.1 * 0.5**3 * (1.0 + 0.2 * 2.0)
    assert abs(stepped.array(0)[0, 0] - expected) < 1e-15


def test_build_arch_mlp_layer_indices_and_shapes():
    model = nn.build_arch("mlp-2", 10, 64, seed=0)
    assert [(l.index, l.kind) for l in model.layers] == [
        (0, "dense"), (1, "bias"), (2, "dense"), (3, "bias"),
    ]
    assert model.array(0).shape == (64, nn.MLP_HIDDEN)
    assert model.array(2).shape == (nn.MLP_HIDDEN, 10)


def test_build_arch_is_deterministic_per_seed():
    a = nn.build_arch("lenet-s", 10, (1, 28, 28), seed=99)
    b = nn.build_arch("lenet-s", 10, (1, 28, 28), seed=99)
    c = nn.build_arch("lenet-s", 10, (1, 28, 28), seed=100)
    assert np.array_equal(nn.flatten_model(a), nn.flatten_model(b))
    assert not np.array_equal(nn.flatten_model(a), nn.flatten_model(c))


def test_build_arch_lenet_final_layer_matches_num_classes():
    model = nn.build_arch("lenet-s", 10, (1, 28, 28), seed=0)
    assert model.array(6).shape[1] == 10
    assert model.array(7).shape == (10,)
    logits = nn.forward(model, np.zeros((1, 1, 28, 28)))
    assert logits.shape == (1, 10)


def test_build_arch_unknown_id_rejected():
    with pytest.raises(ValueError, match="unknown arch_id"):
        nn.build_arch("resnet-50", 10, (3, 32, 32))


def test_engine_calls_are_pure_and_repeatable():
    model = nn.build_arch("lenet-s", 7, (1, 16, 16), seed=5)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 1, 16, 16))
    y = rng.integers(0, 7, size=3)
    before = nn.flatten_model(model)
    l1, g1 = nn.loss_and_gradients(model, x, y)
    l2, g2 = nn.loss_and_gradients(model, x, y)
    assert l1 == l2
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))
    assert np.array_equal(nn.flatten_model(model), before)
    cfg = nn.TrainingConfig(learning_rate=0.05)
    s1, v1 = nn.sgd_step(model, g1, cfg, nn.zeros_velocity(model), 2)
    s2, v2 = nn.sgd_step(model, g1, cfg, nn.zeros_velocity(model), 2)
    assert np.array_equal(nn.flatten_model(s1), nn.flatten_model(s2))


def test_outputs_stay_finite_on_finite_inputs():
    model = nn.build_arch("lenet-s", 10, (1, 16, 16), seed=3)
    x = np.random.default_rng(3).normal(size=(4, 1, 16, 16)) * 10
    loss, grads = nn.loss_and_gradients(model, x, np.arange(4) % 10)
    assert np.isfinite(loss)
    assert all(np.isfinite(g).all() for g in grads)


@settings(max_examples=25, deadline=None)
@given(
    arch=st.sampled_from(["mlp-2", "lenet-s"]),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_flatten_unflatten_round_trip(arch, seed):
    shape = (1, 16, 16) if arch == "lenet-s" else 9
    model = nn.build_arch(arch, 5, shape, seed=seed)
    vec = nn.flatten_model(model)
    back = nn.unflatten_model(model, vec)
    for i in range(model.num_layers):
        assert np.array_equal(model.array(i), back.array(i))
    assert back.layers[i].kind == model.layers[i].kind


def test_sentinel_layer_access_raises_and_reports():
    model = nn.build_arch("mlp-2", 4, 6, seed=0)
    hits = []
    model.layers[2] = nn.Layer(2, "dense", None)
    model.on_sentinel_access = hits.append
    with pytest.raises(nn.IsolationError, match="layer 2"):
        nn.forward(model, np.zeros((1, 6)))
    assert hits == [2]
    assert model.has_sentinels() and model.sentinel_indices() == [2]


def test_training_config_validation():
    with pytest.raises(ValueError, match="momentum"):
        nn.TrainingConfig(momentum=1.0)
    with pytest.raises(ValueError, match="learning_rate"):
        nn.TrainingConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="lr_decay_base"):
        nn.TrainingConfig(lr_decay_base=0.0)
