import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distfl import gradcheck, nn
from conftest import bn_identity_model


# -- forward -------------------------------------------------------------------


def test_zero_logits_give_uniform_probs():
    probs = nn.softmax(np.zeros((3, 4)))
    np.testing.assert_array_equal(probs, np.full((3, 4), 0.25))


def test_softmax_survives_huge_logits():
    probs = nn.softmax(np.array([[1e4, 0.0, -1e4]]))
    assert np.all(np.isfinite(probs))
    assert probs[0, 0] == pytest.approx(1.0)


def test_eval_bn_with_unit_stats_is_identity():
    layer = nn.BatchNorm(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps=0.0)
    model = nn.ModelParams([nn.Linear(np.eye(1), np.zeros(1)), layer, nn.Linear(np.eye(1), np.zeros(1))], 1, 1)
    x = np.array([[-2.5], [0.3], [7.0]])
    out = nn.forward(model, x, "eval").logits
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_train_mode_two_point_statistics():
    model = bn_identity_model()
    res = nn.forward(model.copy(), np.array([[1.0], [3.0]]), "train")
    (mean, var), = res.batch_stats
    assert mean[0] == 2.0
    assert var[0] == 1.0  # population variance


def test_train_mode_updates_running_stats_by_ema():
    model = bn_identity_model(running_mean=0.5, running_var=2.0)
    layer = model.bn_layers()[0]
    nn.forward(model, np.array([[1.0], [3.0]]), "train")
    m = layer.momentum
    assert layer.running_mean[0] == pytest.approx((1 - m) * 0.5 + m * 2.0, abs=1e-15)
    assert layer.running_var[0] == pytest.approx((1 - m) * 2.0 + m * 1.0, abs=1e-15)


def test_eval_forward_is_pure(small_model, rng):
    x = rng.normal(size=(5, 4))
    before = nn.model_to_dict(small_model)
    a = nn.forward(small_model, x, "eval")
    b = nn.forward(small_model, x, "eval")
    assert a.logits.tobytes() == b.logits.tobytes()
    assert nn.model_to_dict(small_model) == before
    assert a.batch_stats == []


def test_probe_mode_reports_stats_without_mutating(small_model, rng):
    x = rng.normal(size=(5, 4))
    before = nn.model_to_dict(small_model)
    res = nn.forward(small_model, x, "probe")
    assert len(res.batch_stats) == 2
    assert nn.model_to_dict(small_model) == before


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_prob_rows_on_simplex(seed, scale):
    rng = np.random.default_rng(seed)
    model = nn.init_model(3, [4], 5, rng)
    probs = nn.forward(model, rng.normal(0, scale, (6, 3)), "eval").probs
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(probs >= 0) and np.all(probs <= 1)


def test_shape_errors(small_model):
    with pytest.raises(nn.ShapeError):
        nn.forward(small_model, np.zeros((2, 5)))
    with pytest.raises(nn.ShapeError):
        nn.forward(small_model, np.zeros((1, 4)), "train")


def test_non_finite_input_rejected(small_model):
    x = np.zeros((2, 4))
    x[0, 0] = np.nan
    with pytest.raises(nn.NonFiniteError):
        nn.forward(small_model, x)


def test_non_finite_activation_rejected(small_model):
    model = small_model.copy()
    model.layers[-1].weight[:] = 1e308
    with pytest.raises(nn.NonFiniteError):
        nn.forward(model, np.ones((2, 4)) * 1e10)


def test_model_invariants_enforced(rng):
    with pytest.raises(nn.ShapeError):  # no BN layer
        nn.ModelParams([nn.Linear(np.zeros((2, 3)), np.zeros(2))], 3, 2)
    with pytest.raises(nn.ShapeError):  # output width != num_classes
        nn.init_model(3, [4], 2, rng).__class__(nn.init_model(3, [4], 2, rng).layers, 3, 5)
    with pytest.raises(ValueError):
        nn.ModelParams(
            [nn.Linear(np.zeros((2, 3)), np.zeros(2)),
             nn.BatchNorm(np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2)),
             nn.Linear(np.zeros((2, 2)), np.zeros(2))], 3, 2)


# -- loss and gradients ----------------------------------------------------------


def test_uniform_probs_give_log_c_loss():
    from conftest import constant_model

    model = constant_model(3, 4, margin=0.0)
    loss, _ = nn.loss_and_grads(model, np.ones((5, 3)), np.array([0, 1, 2, 3, 0]))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_label_out_of_range(small_model):
    with pytest.raises(ValueError):
        nn.loss_and_grads(small_model, np.zeros((2, 4)), np.array([0, 3]))


def test_loss_and_grads_does_not_touch_running_stats(small_model, rng):
    before = nn.model_to_dict(small_model)
    nn.loss_and_grads(small_model, rng.normal(size=(4, 4)), np.array([0, 1, 2, 0]))
    assert nn.model_to_dict(small_model) == before


def test_grads_cover_every_trainable_tensor(small_model, rng):
    _, g = nn.loss_and_grads(small_model, rng.normal(size=(4, 4)), np.array([0, 1, 2, 0]), want_input_grad=True)
    assert [a.shape for a in g.params] == [p.shape for p in small_model.trainable()]
    assert g.input.shape == (4, 4)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    res = gradcheck.check_seed(seed)
    assert res.param_error < gradcheck.TOLERANCE
    assert res.input_error < gradcheck.TOLERANCE
    assert res.bn_match_error < gradcheck.TOLERANCE


def test_eval_mode_input_gradient_matches_finite_differences(small_model, rng):
    x = rng.normal(size=(3, 4))
    y = np.array([0, 2, 1])
    _, g = nn.loss_and_grads(small_model, x, y, want_input_grad=True, mode="eval")
    num = gradcheck.numerical_gradient(lambda: nn.loss_and_grads(small_model, x, y, mode="eval")[0], x)
    assert gradcheck.max_relative_error(g.input, num) < 1e-4


def test_gradients_permute_with_features():
    # hidden units 0 and 1 are mirror images; swapping input features swaps them
    w1 = np.array([[1.0, -0.5], [-0.5, 1.0], [0.3, 0.3]])
    bn = nn.BatchNorm(np.array([1.2, 1.2, 0.7]), np.array([0.1, 0.1, -0.2]), np.zeros(3), np.ones(3))
    w2 = np.array([[0.4, -0.4, 0.2], [-0.4, 0.4, 0.2]])
    model = nn.ModelParams([nn.Linear(w1, np.zeros(3)), bn, nn.ReLU(), nn.Linear(w2, np.zeros(2))], 2, 2)
    x = np.array([[0.5, -1.0], [2.0, 0.3], [-0.7, 0.9]])
    y = np.array([0, 1, 0])
    _, g = nn.loss_and_grads(model, x, y, want_input_grad=True)
    # mirrored problem: swap input features, hidden units 0<->1 and classes 0<->1
    _, gs = nn.loss_and_grads(model, x[:, ::-1], 1 - y, want_input_grad=True)
    np.testing.assert_allclose(gs.input, g.input[:, ::-1], atol=1e-12)
    perm = [1, 0, 2]
    np.testing.assert_allclose(gs.params[0], g.params[0][perm][:, ::-1], atol=1e-12)


# -- BN matching loss ------------------------------------------------------------


def test_bn_match_zero_at_exact_statistics():
    model = bn_identity_model(0.0, 1.0)
    x = np.array([[1.0], [-1.0]])  # mean 0, population var 1
    loss, grad = nn.bn_match_loss_and_input_grad(model, x)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_bn_match_full_selection_equals_unselected(small_model, rng):
    x = rng.normal(size=(6, 4))
    full = [np.arange(c) for c in small_model.hidden_widths()]
    assert nn.bn_match_loss_and_input_grad(small_model, x, full)[0] == nn.bn_match_loss_and_input_grad(small_model, x)[0]


def test_bn_match_is_sum_of_norms(small_model, rng):
    x = rng.normal(size=(6, 4))
    _, _, stats, _ = nn._forward(small_model, x, "probe")
    expect = 0.0
    for layer, (m, v) in zip(small_model.bn_layers(), stats):
        expect += np.linalg.norm(m - layer.running_mean) + np.linalg.norm(v - layer.running_var)
    assert nn.bn_match_loss_and_input_grad(small_model, x)[0] == pytest.approx(expect, rel=1e-12)


def test_bn_match_squared_variant_gradient(small_model, rng):
    x = rng.normal(size=(6, 4))
    sel = [np.array([0, 2]), np.array([1])]
    _, g = nn.bn_match_loss_and_input_grad(small_model, x, sel, squared=True)
    num = gradcheck.numerical_gradient(lambda: nn.bn_match_loss_and_input_grad(small_model, x, sel, squared=True)[0], x)
    assert gradcheck.max_relative_error(g, num) < 1e-4


def test_bn_match_errors(small_model):
    x = np.zeros((3, 4))
    with pytest.raises(ValueError):
        nn.bn_match_loss_and_input_grad(small_model, x, [[], []])
    with pytest.raises(IndexError):
        nn.bn_match_loss_and_input_grad(small_model, x, [[7], [0]])
    with pytest.raises(nn.ShapeError):
        nn.bn_match_loss_and_input_grad(small_model, x[:1])


# -- SGD ------------------------------------------------------------------------------


def _scalar_model(p):
    m = nn.ModelParams(
        [nn.Linear(np.array([[p]]), np.zeros(1)),
         nn.BatchNorm(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1)),
         nn.Linear(np.ones((1, 1)), np.zeros(1))], 1, 1)
    return m


def _grad_for(model, value):
    return nn.GradientSet([np.full_like(p, value) for p in model.trainable()])


def test_plain_gradient_step():
    model = _scalar_model(1.0)
    cfg = nn.TrainConfig(learning_rate=0.5, momentum=0.0)
    new, _ = nn.sgd_step(model, _grad_for(model, 2.0), nn.GradientSet.zeros_like(model), cfg)
    assert new.layers[0].weight[0, 0] == 0.0


def test_zero_gradient_is_fixed_point(small_model):
    cfg = nn.TrainConfig()
    new, v = nn.sgd_step(small_model, nn.GradientSet.zeros_like(small_model), nn.GradientSet.zeros_like(small_model), cfg)
    assert nn.model_to_dict(new) == nn.model_to_dict(small_model)


def test_momentum_recurrence_two_steps():
    # v1 = 1, p1 = -1; v2 = 0.9 + 1 = 1.9, p2 = -2.9
    model = _scalar_model(0.0)
    cfg = nn.TrainConfig(learning_rate=1.0, momentum=0.9)
    v = nn.GradientSet.zeros_like(model)
    g = _grad_for(model, 1.0)
    model, v = nn.sgd_step(model, g, v, cfg)
    assert model.layers[0].weight[0, 0] == -1.0
    model, v = nn.sgd_step(model, g, v, cfg)
    assert model.layers[0].weight[0, 0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_leaves_running_stats_alone(small_model):
    model = small_model.copy()
    model.bn_layers()[0].running_mean[:] = 3.0
    new, _ = nn.sgd_step(model, _grad_for(model, 1.0), nn.GradientSet.zeros_like(model), nn.TrainConfig())
    np.testing.assert_array_equal(new.bn_layers()[0].running_mean, 3.0)


def test_sgd_shape_mismatch(small_model):
    bad = nn.GradientSet([np.zeros(3)] * len(small_model.trainable()))
    with pytest.raises(nn.ShapeError):
        nn.sgd_step(small_model, bad, nn.GradientSet.zeros_like(small_model), nn.TrainConfig())


# -- checkpoints and averaging ---------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_model, rng):
    small_model.bn_layers()[0].running_var[:] = rng.uniform(0.1, 3, 6)
    path = tmp_path / "m.json"
    nn.save_model(small_model, path)
    doc = json.loads(path.read_text())
    assert [layer["kind"] for layer in doc["layers"]] == ["linear", "batchnorm", "relu"] * 2 + ["linear"]
    back = nn.load_model(path)
    for a, b in zip(small_model.trainable() + small_model.running_stats(), back.trainable() + back.running_stats()):
        assert a.tobytes() == b.tobytes()


def test_average_models_mean_of_equals(small_model):
    avg = nn.average_models([small_model] * 3)
    for a, b in zip(avg.trainable(), small_model.trainable()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
