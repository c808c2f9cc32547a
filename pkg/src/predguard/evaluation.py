"""Attack metrics, empirical CDFs, loss curves and report files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import defense as dfn
from .mim import MembershipData, MembershipInferenceNet, decide, mim_forward, mim_loss
from .nn import LossKind


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def precision(self) -> float | None:
        """``None`` when nothing was predicted a member."""
        if self.tp + self.fp == 0:
            return None
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        if self.tp + self.fn == 0:
            return None
        return self.tp / (self.tp + self.fn)


def confusion(decisions, truth) -> ConfusionCounts:
    d = np.asarray(decisions).astype(bool)
    t = np.asarray(truth).astype(bool)
    if d.shape != t.shape:
        raise ValueError(f"length mismatch: {d.shape} vs {t.shape}")
    if d.size == 0:
        raise ValueError("no decisions to score")
    return ConfusionCounts(tp=int(np.sum(d & t)), fp=int(np.sum(d & ~t)),
                           tn=int(np.sum(~d & ~t)), fn=int(np.sum(~d & t)))


class EmpiricalCdf:
    """Right-continuous step function P(w) = #{v_i <= w} / m."""

    def __init__(self, values):
        v = np.sort(np.asarray(values, dtype=np.float64).ravel())
        if v.size == 0:
            raise ValueError("empirical CDF of an empty sample")
        self.values = v

    @property
    def m(self) -> int:
        return len(self.values)

    def __call__(self, w):
        out = np.searchsorted(self.values, w, side="right") / self.m
        return float(out) if np.ndim(out) == 0 else out

    def points(self) -> list[tuple[float, float]]:
        """One (value, fraction) pair per distinct sample value."""
        uniq, counts = np.unique(self.values, return_counts=True)
        return [(float(u), float(c)) for u, c in zip(uniq, np.cumsum(counts) / self.m)]


def empirical_cdf(values) -> EmpiricalCdf:
    return EmpiricalCdf(values)


# ---------------------------------------------------------------------------
# reports

METRICS = ("accuracy", "precision", "recall")


@dataclass
class ClassMetrics:
    count: int
    accuracy: float
    precision: float | None
    recall: float | None


@dataclass
class AttackReport:
    attack: str
    defended: bool
    counts: ConfusionCounts
    per_class: dict[int, ClassMetrics]
    cdf_points: dict[str, list[tuple[float, float]]]
    perturbation_stats: tuple[float, float, float] | None = None
    fingerprint: str = ""
    notes: dict[str, str] = field(default_factory=dict)
    decisions: np.ndarray | None = field(default=None, repr=False)

    @property
    def inference_accuracy(self) -> float:
        return self.counts.accuracy

    @property
    def precision(self) -> float | None:
        return self.counts.precision

    @property
    def recall(self) -> float | None:
        return self.counts.recall


def build_report(decisions, truth, classes, attack: str, defended: bool,
                 perturbation_stats=None, fingerprint: str = "",
                 notes: dict[str, str] | None = None) -> AttackReport:
    decisions = np.asarray(decisions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    per_class = {}
    for k in np.unique(classes):
        sel = classes == k
        c = confusion(decisions[sel], truth[sel])
        per_class[int(k)] = ClassMetrics(int(sel.sum()), c.accuracy, c.precision, c.recall)
    cdfs = {}
    for name in METRICS:
        vals = [getattr(m, name) for m in per_class.values() if getattr(m, name) is not None]
        cdfs[name] = empirical_cdf(vals).points() if vals else []
    return AttackReport(attack, defended, confusion(decisions, truth), per_class, cdfs,
                        perturbation_stats, fingerprint, dict(notes or {}), decisions)


def _check_balanced(data: MembershipData) -> None:
    n_in = int(np.sum(data.membership == 1))
    if n_in * 2 != len(data):
        raise ValueError(f"evaluation set is unbalanced: {n_in} members of {len(data)}")


def evaluate_attack(mim: MembershipInferenceNet, eval_data: MembershipData,
                    defended: dfn.DefendedBatch | None = None, fingerprint: str = "",
                    attack: str | None = None, notes: dict[str, str] | None = None) -> AttackReport:
    """Score ``mim`` on a balanced evaluation set.

    With ``defended`` given, the attack sees the perturbed predictions (rows
    aligned with ``eval_data``) instead of the clean ones.
    """
    _check_balanced(eval_data)
    preds = eval_data.predictions if defended is None else defended.adversarial
    if preds.shape != eval_data.predictions.shape:
        raise ValueError("defended predictions do not align with the evaluation set")
    decisions = decide(mim_forward(mim, preds, eval_data.labels_onehot))
    return build_report(decisions, eval_data.membership, eval_data.classes,
                        attack or mim.name, defended is not None,
                        defended.stats if defended is not None else None, fingerprint, notes)


def capture_loss_curve(mim: MembershipInferenceNet, eval_data: MembershipData,
                       substitute: MembershipInferenceNet, cfg: dfn.DefenseConfig, record_ids,
                       kind: LossKind = LossKind.BINARY_CROSS_ENTROPY) -> list[float]:
    """Mean loss of ``mim`` against the true membership bits after each of
    the ``cfg.iterations`` perturbation steps."""
    sums = np.zeros(cfg.iterations)

    def observe(t, rows, x):
        sums[t] += mim_loss(mim, x, eval_data.labels_onehot[rows], eval_data.membership[rows], kind).sum()

    dfn.defend(eval_data.predictions, substitute, cfg, record_ids, on_iterate=observe)
    return list(sums / len(eval_data))


# ---------------------------------------------------------------------------
# file formats

def _num(v) -> str:
    if v is None:
        return "absent"
    return format(float(v), ".17g")


def dumps_report(r: AttackReport) -> str:
    c = r.counts
    lines = [
        "report v1",
        f"attack={r.attack}",
        f"defended={str(r.defended).lower()}",
        f"config={r.fingerprint}",
    ]
    for k in sorted(r.notes):
        lines.append(f"{k}={r.notes[k]}")
    lines += [
        f"total={c.total}",
        f"tp={c.tp}",
        f"fp={c.fp}",
        f"tn={c.tn}",
        f"fn={c.fn}",
        f"inference_accuracy={_num(r.inference_accuracy)}",
        f"precision={_num(r.precision)}",
        f"recall={_num(r.recall)}",
    ]
    if r.perturbation_stats is not None:
        mean, lo, hi = r.perturbation_stats
        lines += [f"l1_mean={_num(mean)}", f"l1_min={_num(lo)}", f"l1_max={_num(hi)}"]
    lines.append(f"classes={len(r.per_class)}")
    return "\n".join(lines) + "\n"


def loads_report_summary(text: str) -> dict[str, str]:
    lines = text.splitlines()
    if not lines or lines[0] != "report v1":
        raise ValueError("missing 'report v1' header")
    return dict(ln.split("=", 1) for ln in lines[1:] if "=" in ln)


def per_class_csv(r: AttackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "count", "accuracy", "precision", "recall"])
    for k, m in sorted(r.per_class.items()):
        w.writerow([k, m.count, _num(m.accuracy), _num(m.precision), _num(m.recall)])
    return buf.getvalue()


def cdf_csv(r: AttackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "fraction"])
    for name in METRICS:
        for v, f in r.cdf_points[name]:
            w.writerow([name, _num(v), _num(f)])
    return buf.getvalue()


def write_report(r: AttackReport, out_dir: Path, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{stem}.report", out_dir / f"{stem}.per_class.csv", out_dir / f"{stem}.cdf.csv"]
    for p, text in zip(paths, (dumps_report(r), per_class_csv(r), cdf_csv(r))):
        p.write_text(text)
    return paths
