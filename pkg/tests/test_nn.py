import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from predguard import nn

import gradcheck


def _net(sizes, act=nn.Activation.TANH, head=nn.Head.SOFTMAX, seed=0):
    return nn.init_net(nn.DenseNetSpec(sizes, act, head), np.random.default_rng(seed))


def test_identity_layer_linear_head():
    net = nn.DenseNet(nn.DenseNetSpec((2, 2), output_head=nn.Head.LINEAR), [np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(nn.forward(net, [0.3, 0.7]), [0.3, 0.7])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100))
def test_softmax_output_sums_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    net = _net((5, 4, 7), seed=seed)
    out = nn.forward(net, rng.normal(0, scale, (3, 5)))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(out >= 0)


def test_forward_matches_hand_arithmetic():
    rng = np.random.default_rng(5)
    net = _net((3, 4, 2), seed=5)
    x = rng.normal(size=3)
    w0, w1 = net.weights
    b0, b1 = net.biases
    hidden = []
    for j in range(4):
        s = b0[j]
        for i in range(3):
            s += w0[j][i] * x[i]
        hidden.append(np.tanh(s))
    logits = []
    for k in range(2):
        s = b1[k]
        for j in range(4):
            s += w1[k][j] * hidden[j]
        logits.append(s)
    e = [np.exp(z) for z in logits]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(nn.forward(net, x), expected, rtol=0, atol=1e-10)


def test_batch_and_single_agree():
    net = _net((4, 6, 3), act=nn.Activation.RELU)
    X = np.random.default_rng(1).normal(size=(5, 4))
    batch = nn.forward(net, X)
    for row, out in zip(X, batch):
        np.testing.assert_allclose(nn.forward(net, row), out, atol=1e-15)


def test_wrong_input_width():
    with pytest.raises(nn.ShapeError):
        nn.forward(_net((4, 3)), np.zeros(5))


def test_bad_weight_shape_rejected():
    with pytest.raises(nn.ShapeError):
        nn.DenseNet(nn.DenseNetSpec((2, 3)), [np.zeros((2, 3))], [np.zeros(3)])


def test_sigmoid_head_needs_one_unit():
    with pytest.raises(ValueError):
        nn.DenseNetSpec((3, 2), output_head=nn.Head.SIGMOID)


def test_sigmoid_is_stable_at_extremes():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = nn.sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[2] == 0.5 and s[-1] == 1.0


def test_loss_head_mismatch_rejected():
    net = _net((3, 2), head=nn.Head.LINEAR)
    with pytest.raises(ValueError):
        nn.loss(net, np.zeros(3), [1.0, 0.0], nn.LossKind.CROSS_ENTROPY)


def test_cross_entropy_of_uniform_output():
    net = nn.DenseNet(nn.DenseNetSpec((2, 5)), [np.zeros((5, 2))], [np.zeros(5)])
    assert nn.loss(net, [1.0, 2.0], np.eye(5)[3], nn.LossKind.CROSS_ENTROPY) == pytest.approx(np.log(5), abs=1e-14)


@pytest.mark.parametrize("i", range(100))
def test_gradients_match_finite_differences(i):
    assert gradcheck.check_fixture(i) < gradcheck.REL_TOL


def test_fixtures_cover_every_head_and_activation():
    seen = set()
    for i in range(100):
        net, _, _, kind = gradcheck.fixture(i)
        seen.add((net.spec.hidden_activation, net.spec.output_head, kind))
    assert len(seen) == 2 * len(gradcheck.PAIRS)


def test_l2_gradient_zero_at_perfect_fit():
    net = _net((3, 4, 2), head=nn.Head.LINEAR)
    x = np.array([0.2, -0.1, 0.4])
    t = nn.forward(net, x)
    dw, db = nn.parameter_gradients(net, x, t, nn.LossKind.L2)
    assert all(not np.any(g) for g in [*dw, *db])
    assert not np.any(nn.input_gradient(net, x, t, nn.LossKind.L2))


def test_l2_linear_weight_gradient_closed_form():
    rng = np.random.default_rng(3)
    net = _net((4, 3), head=nn.Head.LINEAR, seed=3)
    x, t = rng.normal(size=4), rng.normal(size=3)
    out = net.weights[0] @ x + net.biases[0]
    dw, db = nn.parameter_gradients(net, x, t, nn.LossKind.L2)
    np.testing.assert_allclose(dw[0], 2 * np.outer(out - t, x), atol=1e-14)
    np.testing.assert_allclose(db[0], 2 * (out - t), atol=1e-14)


def test_bce_input_gradient_closed_form():
    w, b = np.array([[0.7, -1.2, 0.4]]), np.array([0.1])
    net = nn.DenseNet(nn.DenseNetSpec((3, 1), output_head=nn.Head.SIGMOID), [w], [b])
    x = np.array([0.5, 0.25, -1.0])
    s = 1 / (1 + np.exp(-(w[0] @ x + b[0])))
    g = nn.input_gradient(net, x, 1.0, nn.LossKind.BINARY_CROSS_ENTROPY)
    np.testing.assert_allclose(g, (s - 1) * w[0], atol=1e-15)


def test_relu_subgradient_at_zero():
    # hidden pre-activations are exactly zero, so relu'(0) = 0 blocks everything
    spec = nn.DenseNetSpec((2, 2, 1), nn.Activation.RELU, nn.Head.SIGMOID)
    net = nn.DenseNet(spec, [np.ones((2, 2)), np.ones((1, 2))], [np.zeros(2), np.zeros(1)])
    g = nn.input_gradient(net, [1.0, -1.0], 1.0, nn.LossKind.BINARY_CROSS_ENTROPY)
    np.testing.assert_array_equal(g, [0.0, 0.0])


def _separable_points():
    rng = np.random.default_rng(11)
    X = rng.uniform(-1, 1, (20, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0.1).astype(float)
    return X, y


def test_sigmoid_net_fits_separable_data():
    X, y = _separable_points()
    # confirm separability independently: some direction on a fine grid splits the classes
    separable = False
    for a in np.linspace(0, np.pi, 721):
        proj = X @ np.array([np.cos(a), np.sin(a)])
        for lo, hi in ((proj[y == 1], proj[y == 0]), (proj[y == 0], proj[y == 1])):
            if lo.min() > hi.max():
                separable = True
    assert separable
    net = _net((2, 1), head=nn.Head.SIGMOID)
    cfg = nn.TrainConfig(learning_rate=0.1, epochs=200, batch_size=4, seed=0)
    trained = nn.train(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY, cfg)
    pred = (nn.forward(trained, X)[:, 0] >= 0.5).astype(float)
    assert np.array_equal(pred, y)


@pytest.mark.parametrize("opt", list(nn.Optimizer))
def test_training_is_deterministic(opt):
    X, y = _separable_points()
    net = _net((2, 3, 1), head=nn.Head.SIGMOID)
    cfg = nn.TrainConfig(learning_rate=0.05, epochs=5, batch_size=3, seed=4, optimizer=opt)
    a = nn.train(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY, cfg)
    b = nn.train(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY, cfg)
    assert a == b
    assert a != net


def test_training_leaves_input_net_untouched():
    X, y = _separable_points()
    net = _net((2, 1), head=nn.Head.SIGMOID)
    before = net.copy()
    nn.train(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY, nn.TrainConfig(0.1, 2, 5))
    assert net == before


def test_history_records_one_loss_per_epoch():
    X, y = _separable_points()
    hist = []
    nn.train(_net((2, 1), head=nn.Head.SIGMOID), X, y, nn.LossKind.BINARY_CROSS_ENTROPY,
             nn.TrainConfig(0.1, 7, 5), history=hist)
    assert len(hist) == 7
    assert hist[-1] < hist[0]


@pytest.mark.parametrize("field,value", [("epochs", 0), ("learning_rate", 0.0), ("batch_size", 0)])
def test_invalid_train_config(field, value):
    with pytest.raises(ValueError):
        nn.TrainConfig(**{field: value})


def test_divergence_is_reported():
    X = np.random.default_rng(0).normal(size=(32, 3)) * 1e3
    net = _net((3, 2), head=nn.Head.LINEAR)
    with pytest.raises(nn.DivergenceError), np.errstate(over="ignore", invalid="ignore"):
        nn.train(net, X, X[:, :2] * 1e3, nn.LossKind.L2,
                 nn.TrainConfig(learning_rate=1e3, epochs=50, optimizer=nn.Optimizer.SGD))


def test_sgd_step_matches_manual_update():
    X, y = _separable_points()
    net = _net((2, 1), head=nn.Head.SIGMOID)
    cfg = nn.TrainConfig(learning_rate=0.3, epochs=1, batch_size=20, optimizer=nn.Optimizer.SGD)
    trained = nn.train(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY, cfg)
    dw, db = nn.parameter_gradients(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY)
    np.testing.assert_allclose(trained.weights[0], net.weights[0] - 0.3 * dw[0], atol=1e-14)
    np.testing.assert_allclose(trained.biases[0], net.biases[0] - 0.3 * db[0], atol=1e-14)


def test_adam_first_step_moves_each_weight_by_lr():
    # with bias correction, Adam's first step is lr * g / (|g| + eps') ~ lr * sign(g)
    X, y = _separable_points()
    net = _net((2, 1), head=nn.Head.SIGMOID)
    cfg = nn.TrainConfig(learning_rate=0.01, epochs=1, batch_size=20)
    trained = nn.train(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY, cfg)
    dw, _ = nn.parameter_gradients(net, X, y, nn.LossKind.BINARY_CROSS_ENTROPY)
    np.testing.assert_allclose(trained.weights[0], net.weights[0] - 0.01 * np.sign(dw[0]), atol=1e-8)


def test_batch_order_is_a_partition():
    rng = np.random.default_rng(0)
    batches = list(nn.batch_order(10, 3, rng))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(itertools.chain.from_iterable(batches)) == list(range(10))


def test_checkpoint_round_trip():
    net = _net((4, 5, 3), act=nn.Activation.RELU, seed=9)
    net.biases[0][:] = np.random.default_rng(9).normal(size=5)
    text = nn.dumps(net, ["role=test", "hello world"])
    back, notes = nn.loads(text)
    assert back == net
    assert notes == ["role=test", "hello world"]
    assert nn.dumps(back, notes) == text
    assert nn.fingerprint(back) == nn.fingerprint(net)


@pytest.mark.parametrize("text", ["", "densenet v2\n", "densenet v1\nspec 2,1 tanh\n",
                                  "densenet v1\nspec 2,1 tanh linear\nlayer 0 weights 1x2\n"])
def test_malformed_checkpoints(text):
    with pytest.raises((nn.CheckpointError, ValueError)):
        nn.loads(text)
