"""Attacks by adversaries who know how the defense works."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import defense as dfn
from . import nn
from .data import Dataset, DatasetSplit
from .evaluation import AttackReport, build_report, evaluate_attack
from .mim import (MembershipData, MembershipInferenceNet, MimVariantConfig, build_mim_training_set,
                  train_mim)
from .target import TargetModel


@dataclass(frozen=True)
class AdaptiveAttackConfig:
    kind: str
    rounding_decimals: int = 3
    defense_cfg: dfn.DefenseConfig | None = None

    def __post_init__(self):
        if self.kind not in ("flip", "rounding", "adversarial_training"):
            raise ValueError(f"unknown adaptive attack {self.kind!r}")
        if self.rounding_decimals < 1:
            raise ValueError("rounding_decimals must be >= 1")


def flip_attack(decisions):
    d = np.asarray(decisions, dtype=np.int64)
    if d.size == 0:
        raise ValueError("no decisions to flip")
    return 1 - d


def flip_report(base: AttackReport, eval_data: MembershipData) -> AttackReport:
    """Re-score an existing report's decisions with every bit inverted."""
    return build_report(flip_attack(base.decisions), eval_data.membership, eval_data.classes,
                        "flip", base.defended, base.perturbation_stats, base.fingerprint,
                        {**base.notes, "base_attack": base.attack})


def _adversary_set(target: TargetModel, data: Dataset, split: DatasetSplit, seed: int):
    train = build_mim_training_set(target, data, split.adv_member, split.adv_non_member, seed)
    return train, train.record_ids


def rounding_attack(target: TargetModel, substitute: MembershipInferenceNet, data: Dataset,
                    split: DatasetSplit, decimals: int, mim_cfg: MimVariantConfig,
                    tcfg: nn.TrainConfig, defense_cfg: dfn.DefenseConfig,
                    eval_data: MembershipData, eval_defended: dfn.DefendedBatch,
                    fingerprint: str = "") -> AttackReport:
    """Train on truncated defended outputs, attack truncated defended outputs."""
    train, ids = _adversary_set(target, data, split, tcfg.seed)
    seen = dfn.defend(train.predictions, substitute, defense_cfg, ids)
    train = train.with_predictions(dfn.truncation_defense(seen.adversarial, decimals))
    model = train_mim(mim_cfg, train, tcfg)
    rounded = dfn.DefendedBatch(eval_defended.original,
                                dfn.truncation_defense(eval_defended.adversarial, decimals),
                                eval_defended.l1, eval_defended.decisions)
    return evaluate_attack(model, eval_data, rounded, fingerprint, attack="rounding",
                           notes={"decimals": str(decimals)})


@dataclass
class AdversarialTrainingResult:
    report: AttackReport
    model: MembershipInferenceNet
    attacker_source: MembershipInferenceNet


def adversarial_training_attack(target: TargetModel, data: Dataset, split: DatasetSplit,
                                mim_cfg: MimVariantConfig, tcfg: nn.TrainConfig,
                                attacker_defense: dfn.DefenseConfig,
                                eval_data: MembershipData, eval_defended: dfn.DefendedBatch,
                                attacker_model: MembershipInferenceNet | None = None,
                                fingerprint: str = "") -> AdversarialTrainingResult:
    """Robustify the attack model with the attacker's own perturbations.

    The attacker has no access to the defender's substitute, so its own
    (clean-trained) model is the gradient source. Training data is the clean
    adversary set plus one perturbed copy of it.
    """
    clean, ids = _adversary_set(target, data, split, tcfg.seed)
    source = attacker_model if attacker_model is not None else train_mim(mim_cfg, clean, tcfg)
    perturbed = dfn.defend(clean.predictions, source, attacker_defense, ids)
    mixture = MembershipData.concat([clean, clean.with_predictions(perturbed.adversarial)])
    robust_cfg = nn.TrainConfig(tcfg.learning_rate, tcfg.epochs, tcfg.batch_size,
                                tcfg.seed + 1, tcfg.optimizer)
    model = train_mim(mim_cfg, mixture, robust_cfg)
    report = evaluate_attack(model, eval_data, eval_defended, fingerprint, attack="adv_training")
    return AdversarialTrainingResult(report, model, source)
