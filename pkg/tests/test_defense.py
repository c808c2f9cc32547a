import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from predguard import defense as dfn, mim, nn, target


def _substitute(K=5, seed=0):
    cfg = mim.MimVariantConfig("sub", prediction_sizes=(8,), label_sizes=(8,), connection_sizes=(6, 1))
    return mim.init_mim(cfg, K, np.random.default_rng(seed))


def _preds(n, K=5, seed=0):
    return np.random.default_rng(seed).dirichlet(np.ones(K), n)


class FixedU:
    """rng stand-in whose uniform draws are always ``u``."""

    def __init__(self, u):
        self.u = u

    def random(self, *shape):
        return self.u if not shape else np.full(shape, self.u)


@pytest.mark.parametrize("p,expected", [([0.1, 0.7, 0.2], [0, 1, 0]), ([0.5, 0.5], [1, 0]),
                                        ([0.25] * 4, [1, 0, 0, 0])])
def test_one_hot_argmax(p, expected):
    np.testing.assert_array_equal(dfn.one_hot_argmax(p), expected)


def test_one_hot_argmax_rows():
    np.testing.assert_array_equal(dfn.one_hot_argmax([[0.2, 0.8], [0.5, 0.5]]), [[0, 1], [1, 0]])


def test_perturbation_size():
    assert dfn.perturbation_size([0.5, 0.5], [0.6, 0.4]) == pytest.approx(0.2, abs=1e-15)
    assert dfn.perturbation_size([0.3, 0.7], [0.3, 0.7]) == 0.0
    with pytest.raises(ValueError):
        dfn.perturbation_size([0.1], [0.1, 0.2])


@pytest.mark.parametrize("x,d,expected", [(0.2599, 2, 0.25), (0.2501, 2, 0.25), (0.2599, 3, 0.259),
                                          (0.29, 2, 0.29), (1.0, 3, 1.0), (0.0, 1, 0.0)])
def test_truncation_floors(x, d, expected):
    assert dfn.truncation_defense(np.array([x]), d)[0] == pytest.approx(expected, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(0, 1), d=st.integers(1, 8))
def test_truncation_never_rounds_up(x, d):
    t = dfn.truncation_defense(np.array([x]), d)[0]
    assert t <= x + 1e-12 and x - t < 10.0 ** -d + 1e-12


def test_zero_gradient_substitute_is_a_no_op():
    sub = _substitute()
    for n in sub.nets():
        for w in n.weights:
            w[:] = 0
    p = _preds(1)[0]
    tr = dfn.generate_adversarial_prediction(p, sub, dfn.DefenseConfig(0.1, 25), np.random.default_rng(0))
    np.testing.assert_array_equal(tr.adversarial, p)
    assert tr.l1_size == 0.0


def test_vanishing_epsilon():
    p = _preds(1)[0]
    tr = dfn.generate_adversarial_prediction(p, _substitute(), dfn.DefenseConfig(1e-300, 50),
                                             np.random.default_rng(0))
    assert tr.l1_size < 1e-290


def test_one_step_closed_form():
    # single linear sigmoid unit as the whole pipeline: zero-width hidden parts collapse
    K = 3
    w_p, w_l = np.array([0.8, -0.5, 0.3]), np.array([0.2, 0.1, -0.4])
    ident = lambda w: nn.DenseNet(nn.DenseNetSpec((K, 1), nn.Activation.TANH, nn.Head.LINEAR),
                                  [w[None, :]], [np.zeros(1)])
    conn = nn.DenseNet(nn.DenseNetSpec((2, 1), nn.Activation.TANH, nn.Head.SIGMOID),
                       [np.array([[1.0, 1.0]])], [np.array([0.05])])
    sub = mim.MembershipInferenceNet(conn, ident(w_p), ident(w_l))
    p = np.array([0.2, 0.5, 0.3])
    y = np.array([0.0, 1.0, 0.0])
    a, b = np.tanh(w_p @ p), np.tanh(w_l @ y)
    s = 1 / (1 + np.exp(-(a + b + 0.05)))
    y_target = 1.0 if s >= 0.5 else 0.0
    # d BCE / d p = (s - y_target) * tanh'(w_p . p) * w_p
    g = (s - y_target) * (1 - a * a) * w_p
    eps = 0.01
    tr = dfn.generate_adversarial_prediction(p, sub, dfn.DefenseConfig(eps, 1), FixedU(0.5))
    np.testing.assert_allclose(tr.adversarial, p + 0.5 * eps * np.sign(g), atol=1e-12)
    assert tr.substitute_decision_initial == int(y_target)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(1e-4, 0.5), T=st.integers(1, 30))
def test_iterates_stay_in_the_box_and_within_step_bound(seed, eps, T):
    K = 5
    p = _preds(1, K, seed)[0]
    tr = dfn.generate_adversarial_prediction(p, _substitute(K, seed), dfn.DefenseConfig(eps, T),
                                             np.random.default_rng(seed), keep_iterates=True)
    assert len(tr.iterates) == T
    prev = p
    for x in tr.iterates:
        assert np.all((x >= 0) & (x <= 1))
        assert np.all(np.abs(x - prev) <= eps + 1e-15)
        prev = x
    assert tr.l1_size <= T * eps * K + 1e-12


def test_loss_moves_toward_the_flipped_decision():
    sub = _substitute(seed=2)
    p = _preds(1, seed=2)[0]
    tr = dfn.generate_adversarial_prediction(p, sub, dfn.DefenseConfig(0.02, 40), np.random.default_rng(1))
    # loss is measured against the original decision, so pushing away from it raises it
    y = dfn.one_hot_argmax(p)
    start = mim.mim_loss(sub, p, y, tr.substitute_decision_initial, nn.LossKind.BINARY_CROSS_ENTROPY)[0]
    assert tr.loss_per_iteration[-1] > start
    start_p = mim.mim_forward(sub, p, y)
    end_p = mim.mim_forward(sub, tr.adversarial, y)
    assert (end_p < start_p) if tr.substitute_decision_initial else (end_p > start_p)


def test_step_sizes_are_random():
    sub = _substitute()
    p = _preds(1)[0]
    cfg = dfn.DefenseConfig(0.01, 10)
    tr = dfn.generate_adversarial_prediction(p, sub, cfg, np.random.default_rng(0), keep_iterates=True)
    steps = [np.abs(b - a).max() for a, b in zip([p, *tr.iterates], tr.iterates)]
    assert len({round(s, 12) for s in steps}) > 1


def test_batch_matches_single_record_path():
    sub = _substitute(seed=3)
    P = _preds(7, seed=3)
    ids = np.array([10, 3, 99, 4, 5, 6, 7])
    cfg = dfn.DefenseConfig(0.01, 20, seed=42)
    batch = dfn.defend(P, sub, cfg, ids)
    for i, rid in enumerate(ids):
        tr = dfn.generate_adversarial_prediction(P[i], sub, cfg, dfn.record_stream(cfg.seed, rid))
        np.testing.assert_allclose(batch.adversarial[i], tr.adversarial, atol=1e-15)
        assert batch.l1[i] == pytest.approx(tr.l1_size, abs=1e-14)
        assert batch.decisions[i] == tr.substitute_decision_initial


def test_record_streams_do_not_depend_on_batch_composition():
    sub = _substitute(seed=4)
    P = _preds(6, seed=4)
    ids = np.arange(6)
    cfg = dfn.DefenseConfig(0.01, 15, seed=1)
    full = dfn.defend(P, sub, cfg, ids)
    part = dfn.defend(P[[4, 1]], sub, cfg, ids[[4, 1]])
    np.testing.assert_array_equal(part.adversarial, full.adversarial[[4, 1]])


def test_threads_and_chunking_do_not_change_results(monkeypatch):
    sub = _substitute(seed=5)
    P = _preds(50, seed=5)
    cfg = dfn.DefenseConfig(0.01, 10, seed=2)
    one = dfn.defend(P, sub, cfg, np.arange(50))
    monkeypatch.setattr(dfn, "CHUNK", 7)
    many = dfn.defend(P, sub, cfg, np.arange(50), threads=4)
    np.testing.assert_array_equal(one.adversarial, many.adversarial)


def test_epsilon_zero_is_exact_no_op():
    P = _preds(5)
    b = dfn.defend(P, _substitute(), dfn.DefenseConfig(0.0, 10), np.arange(5))
    np.testing.assert_array_equal(b.adversarial, P)
    assert b.stats == (0.0, 0.0, 0.0)
    assert b.top1_agreement() == 1.0


def test_on_iterate_sees_every_step():
    seen = []
    dfn.defend(_preds(4), _substitute(), dfn.DefenseConfig(0.01, 6), np.arange(4),
               on_iterate=lambda t, rows, x: seen.append((t, len(rows))))
    assert seen == [(t, 4) for t in range(6)]


def test_renormalize_option():
    P = _preds(5)
    b = dfn.defend(P, _substitute(), dfn.DefenseConfig(0.05, 10, renormalize=True), np.arange(5))
    np.testing.assert_allclose(b.adversarial.sum(axis=1), 1.0, atol=1e-12)


def test_no_renormalization_by_default():
    P = _preds(20)
    b = dfn.defend(P, _substitute(), dfn.DefenseConfig(0.05, 10), np.arange(20))
    assert np.abs(b.adversarial.sum(axis=1) - 1).max() > 1e-6


def test_ids_must_align():
    with pytest.raises(ValueError):
        dfn.defend(_preds(3), _substitute(), dfn.DefenseConfig(0.1), [1, 2])


@pytest.mark.parametrize("kw", [dict(epsilon=-1.0), dict(epsilon=float("nan")), dict(epsilon=0.1, iterations=0)])
def test_invalid_defense_config(kw):
    with pytest.raises(ValueError):
        dfn.DefenseConfig(**kw)


def test_manifest_mentions_substitute_and_stats():
    sub = _substitute()
    b = dfn.defend(_preds(3), sub, dfn.DefenseConfig(0.01, 5), np.arange(3))
    text = dfn.manifest(dfn.DefenseConfig(0.01, 5), sub, b, "abc")
    assert text.startswith("defense-run v1\nconfig=abc\n")
    assert f"substitute_sha256={mim.fingerprint(sub)}" in text


def test_top1_agreement_on_trained_target(tiny):
    ds, split, model = tiny
    sub_cfg = mim.MimVariantConfig("sub", prediction_sizes=(16,), label_sizes=(16,), connection_sizes=(8, 1))
    tr = mim.build_mim_training_set(model, ds, split.member, split.non_member)
    sub = mim.train_mim(sub_cfg, tr, nn.TrainConfig(1e-3, 5, 16))
    P = target.predict(model, ds.features[split.non_member])
    b = dfn.defend(P, sub, dfn.DefenseConfig(1e-4, 100), split.non_member)
    assert b.top1_agreement() >= 0.99
