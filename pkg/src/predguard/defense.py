"""Adversarial perturbation of confidence vectors.

Each prediction is pushed, by iterated signed-gradient steps of random size,
towards the opposite side of the substitute membership model's decision
boundary. The starting decision fixes the direction for every iteration.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import mim as mim_mod
from .mim import MembershipInferenceNet, mim_forward, mim_input_gradient
from .nn import LossKind

# rows per gradient batch; bounds peak memory of the substitute's activations
CHUNK = 2048


class DefenseError(ArithmeticError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite substitute gradient at iteration {iteration}")


@dataclass(frozen=True)
class DefenseConfig:
    epsilon: float
    iterations: int = 100
    seed: int = 0
    renormalize: bool = False

    def __post_init__(self):
        # epsilon == 0 is allowed and is an exact no-op
        if not self.epsilon >= 0 or not np.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be a finite non-negative number, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class PerturbationTrace:
    original: np.ndarray
    adversarial: np.ndarray
    l1_size: float
    substitute_decision_initial: int
    loss_per_iteration: list[float] = field(default_factory=list)
    iterates: list[np.ndarray] | None = None


def one_hot_argmax(prediction) -> np.ndarray:
    """One-hot of the top class; ties go to the lowest index."""
    p = np.asarray(prediction, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty prediction")
    out = np.zeros_like(p)
    if p.ndim == 1:
        out[np.argmax(p)] = 1.0
    else:
        out[np.arange(len(p)), np.argmax(p, axis=1)] = 1.0
    return out


def perturbation_size(original, adversarial):
    """L1 distance, per row for 2-D input."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.abs(b - a).sum(axis=-1)
    return float(d) if d.ndim == 0 else d


def truncation_defense(prediction, decimals: int) -> np.ndarray:
    """Floor every score to ``decimals`` decimal places."""
    if decimals < 1:
        raise ValueError("decimals must be >= 1")
    scale = 10.0 ** decimals
    scaled = np.asarray(prediction, dtype=np.float64) * scale
    # snap products like 28.999999999999996 (0.29 * 100) before flooring
    snapped = np.round(scaled, max(0, 12 - decimals))
    return np.floor(snapped) / scale


def record_stream(seed: int, record_id: int) -> np.random.Generator:
    """Independent step-size stream for one record."""
    return np.random.default_rng([int(seed), int(record_id)])


def _step_sizes(cfg: DefenseConfig, record_ids) -> np.ndarray:
    return np.stack([record_stream(cfg.seed, r).random(cfg.iterations) for r in record_ids]) \
        if len(record_ids) else np.zeros((0, cfg.iterations))


def generate_adversarial_prediction(prediction, substitute: MembershipInferenceNet,
                                    cfg: DefenseConfig, rng,
                                    keep_iterates: bool = False) -> PerturbationTrace:
    """Perturb one softmax vector.

    ``rng`` supplies the per-iteration uniform draw through ``rng.random()``.
    The trace records the substitute's loss after each update.
    """
    original = np.asarray(prediction, dtype=np.float64)
    y_hat = one_hot_argmax(original)
    start = mim_forward(substitute, original, y_hat)
    decision = int(start >= 0.5)
    x = original.copy()
    losses = []
    iterates = [] if keep_iterates else None
    for t in range(cfg.iterations):
        g = mim_input_gradient(substitute, x, y_hat, decision, LossKind.BINARY_CROSS_ENTROPY)
        if not np.all(np.isfinite(g)):
            raise DefenseError(t)
        step = float(rng.random()) * cfg.epsilon
        x = np.clip(x + step * np.sign(g), 0.0, 1.0)
        if keep_iterates:
            iterates.append(x.copy())
        losses.append(float(mim_mod.mim_loss(substitute, x, y_hat, decision,
                                             LossKind.BINARY_CROSS_ENTROPY)[0]))
    if cfg.renormalize:
        x = _renormalize(x)
    return PerturbationTrace(original, x, perturbation_size(original, x), decision, losses, iterates)


def _renormalize(x: np.ndarray) -> np.ndarray:
    s = x.sum(axis=-1, keepdims=True)
    return np.where(s > 0, x / np.where(s > 0, s, 1.0), x)


@dataclass
class DefendedBatch:
    original: np.ndarray
    adversarial: np.ndarray
    l1: np.ndarray
    decisions: np.ndarray  # substitute decision on the original prediction

    @property
    def stats(self) -> tuple[float, float, float]:
        if len(self.l1) == 0:
            return (0.0, 0.0, 0.0)
        return float(self.l1.mean()), float(self.l1.min()), float(self.l1.max())

    def top1_agreement(self) -> float:
        return float(np.mean(np.argmax(self.original, 1) == np.argmax(self.adversarial, 1)))


def _run_chunk(substitute, cfg, x, Y, decisions, steps, rows, on_iterate):
    for t in range(cfg.iterations):
        g = mim_input_gradient(substitute, x, Y, decisions, LossKind.BINARY_CROSS_ENTROPY)
        if not np.all(np.isfinite(g)):
            raise DefenseError(t)
        x = np.clip(x + steps[:, t:t + 1] * np.sign(g), 0.0, 1.0)
        if on_iterate is not None:
            on_iterate(t, rows, x)
    return x


def defend(predictions, substitute: MembershipInferenceNet, cfg: DefenseConfig, record_ids,
           on_iterate: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
           threads: int = 1) -> DefendedBatch:
    """Batched form of :func:`generate_adversarial_prediction`.

    Row ``i`` uses the stream ``record_stream(cfg.seed, record_ids[i])``.
    Rows are processed in fixed chunks of ``CHUNK``; ``threads`` only changes
    how many chunks run at once, never the result. ``on_iterate(t, rows,
    iterate)`` sees every post-update iterate and forces sequential chunks.
    """
    P = np.asarray(predictions, dtype=np.float64)
    record_ids = np.asarray(record_ids, dtype=np.int64)
    if len(record_ids) != len(P):
        raise ValueError("one record id per prediction required")
    Y = one_hot_argmax(P) if len(P) else P.copy()
    decisions = mim_mod.decide(mim_forward(substitute, P, Y)) if len(P) else np.zeros(0, np.int64)
    adv = P.copy()
    if cfg.epsilon > 0 and len(P):
        steps = _step_sizes(cfg, record_ids) * cfg.epsilon
        chunks = [np.arange(lo, min(lo + CHUNK, len(P))) for lo in range(0, len(P), CHUNK)]

        def work(rows):
            return _run_chunk(substitute, cfg, adv[rows], Y[rows], decisions[rows], steps[rows],
                              rows, on_iterate)

        if threads > 1 and on_iterate is None and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, chunks))
        else:
            results = [work(rows) for rows in chunks]
        for rows, x in zip(chunks, results):
            adv[rows] = x
    elif on_iterate is not None:
        for t in range(cfg.iterations):
            on_iterate(t, np.arange(len(P)), adv)
    if cfg.renormalize:
        adv = _renormalize(adv)
    return DefendedBatch(P, adv, perturbation_size(P, adv) if len(P) else np.zeros(0), decisions)


def manifest(cfg: DefenseConfig, substitute: MembershipInferenceNet, batch: DefendedBatch,
             fingerprint: str = "") -> str:
    mean, lo, hi = batch.stats
    lines = [
        "defense-run v1",
        f"config={fingerprint}",
        f"epsilon={cfg.epsilon!r}",
        f"iterations={cfg.iterations}",
        f"seed={cfg.seed}",
        f"renormalize={str(cfg.renormalize).lower()}",
        f"substitute_sha256={mim_mod.fingerprint(substitute)}",
        f"records={len(batch.l1)}",
        f"l1_mean={mean!r}",
        f"l1_min={lo!r}",
        f"l1_max={hi!r}",
        f"top1_agreement={batch.top1_agreement() if len(batch.l1) else 1.0!r}",
    ]
    return "\n".join(lines) + "\n"
