from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from predguard import adaptive, defense as dfn, evaluation as ev, mim, nn


def test_flip_inverts_bits():
    np.testing.assert_array_equal(adaptive.flip_attack([1, 0, 1]), [0, 1, 0])


def test_flip_of_nothing_is_rejected():
    with pytest.raises(ValueError):
        adaptive.flip_attack([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=100))
def test_flip_is_an_involution(bits):
    np.testing.assert_array_equal(adaptive.flip_attack(adaptive.flip_attack(bits)), bits)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 50))
def test_flipped_accuracy_is_the_complement(seed, n):
    rng = np.random.default_rng(seed)
    truth = np.array([1] * n + [0] * n)
    d = rng.integers(0, 2, 2 * n)
    base = ev.build_report(d, truth, rng.integers(0, 3, 2 * n), "MIM0", True)
    classes = rng.integers(0, 3, 2 * n)
    data = mim.MembershipData(np.zeros((2 * n, 3)), np.eye(3)[classes], truth, classes)
    flipped = adaptive.flip_report(base, data)
    # exact in rationals; the float quotients may differ in the last ulp
    assert Fraction(flipped.counts.tp + flipped.counts.tn, 2 * n) == \
        1 - Fraction(base.counts.tp + base.counts.tn, 2 * n)
    assert flipped.inference_accuracy == pytest.approx(1 - base.inference_accuracy, abs=1e-15)
    assert flipped.attack == "flip" and flipped.notes["base_attack"] == "MIM0"


@pytest.mark.parametrize("kw", [dict(kind="bogus"), dict(kind="rounding", rounding_decimals=0)])
def test_invalid_adaptive_config(kw):
    with pytest.raises(ValueError):
        adaptive.AdaptiveAttackConfig(**kw)


def _attack_fixture(tiny):
    ds, split, model = tiny
    small = mim.MimVariantConfig("MIM0", prediction_sizes=(16,), label_sizes=(8,), connection_sizes=(8, 1))
    sub_cfg = mim.MimVariantConfig("substitute", prediction_sizes=(16,), label_sizes=(16,),
                                   connection_sizes=(8, 1))
    tcfg = nn.TrainConfig(1e-3, 10, 16, seed=3)
    sub = mim.train_mim(sub_cfg, mim.build_mim_training_set(model, ds, split.member, split.non_member), tcfg)
    eval_data = mim.build_mim_training_set(model, ds, split.eval_member, split.eval_non_member)
    dcfg = dfn.DefenseConfig(2e-3, 50, seed=1)
    store = dfn.defend(eval_data.predictions, sub, dcfg, eval_data.record_ids)
    return ds, split, model, small, tcfg, sub, eval_data, dcfg, store


def test_rounding_with_many_decimals_matches_plain_defended_attack(tiny):
    ds, split, model, small, tcfg, sub, eval_data, dcfg, store = _attack_fixture(tiny)
    fine = adaptive.rounding_attack(model, sub, ds, split, 15, small, tcfg, dcfg, eval_data, store)
    # with 15 decimals truncation changes nothing, so this is a MIM trained on defended outputs
    train = mim.build_mim_training_set(model, ds, split.adv_member, split.adv_non_member, tcfg.seed)
    seen = dfn.defend(train.predictions, sub, dcfg, train.record_ids)
    plain_model = mim.train_mim(small, train.with_predictions(seen.adversarial), tcfg)
    plain = ev.evaluate_attack(plain_model, eval_data, store)
    assert abs(fine.inference_accuracy - plain.inference_accuracy) <= 0.02
    assert fine.attack == "rounding" and fine.notes["decimals"] == "15"


def test_adversarial_training_uses_its_own_source_model(tiny):
    ds, split, model, small, tcfg, sub, eval_data, dcfg, store = _attack_fixture(tiny)
    res = adaptive.adversarial_training_attack(model, ds, split, small, tcfg, dcfg, eval_data, store)
    assert res.attacker_source != sub
    assert res.report.attack == "adv_training" and res.report.defended
    again = adaptive.adversarial_training_attack(model, ds, split, small, tcfg, dcfg, eval_data, store)
    assert again.model == res.model
