"""End-to-end pipeline over one :class:`ExperimentConfig`.

:class:`Lab` builds (or loads) every artifact lazily and caches it. Artifacts
of the configured setting are written to the output directory next to a
``.manifest`` holding the stage fingerprint they were produced under; sweep
variants (other class counts or adversary fractions) stay in memory.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adaptive, data, defense as dfn, evaluation, mim, target
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ALL = frozenset({"data", "target", "substitute", "mim", "defended"})


class MissingArtifact(FileNotFoundError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass
class SweepRow:
    value: float
    l1_mean: float
    accuracy: float
    precision: float | None
    recall: float | None
    extra: dict[str, float] | None = None


def _fmt(v) -> str:
    return "absent" if v is None else format(float(v), ".17g")


class Lab:
    def __init__(self, cfg: ExperimentConfig, out: Path | None = None,
                 build: frozenset[str] | set[str] = ALL, threads: int = 1, persist: bool = True):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.build = frozenset(build)
        self.threads = threads
        self.persist = persist
        self._cache: dict = {}

    # -- artifact files ----------------------------------------------------
    def path(self, name: str) -> Path:
        return self.out / name

    def _write(self, name: str, payload: str | bytes, stage: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        if isinstance(payload, str):
            payload = payload.encode()
        p.write_bytes(payload)
        digest = hashlib.sha256(payload).hexdigest()
        self.path(name + ".manifest").write_text(
            f"artifact={name}\nconfig={self.cfg.fingerprint(stage)}\nsha256={digest}\n")
        return p

    def _existing(self, name: str, stage: str, kind: str) -> Path | None:
        """Path of a saved artifact valid for the current config, else None.

        A stale artifact is rebuilt when ``kind`` may be built, and is an
        error otherwise.
        """
        p = self.path(name)
        m = self.path(name + ".manifest")
        if not p.exists() or not m.exists():
            return None
        fields = dict(ln.split("=", 1) for ln in m.read_text().splitlines() if "=" in ln)
        if fields.get("config") != self.cfg.fingerprint(stage):
            if kind in self.build:
                return None
            raise FingerprintMismatch(
                f"{p} was produced under config {fields.get('config')}, "
                f"current config is {self.cfg.fingerprint(stage)}")
        return p

    def _need(self, kind: str, name: str) -> None:
        if kind not in self.build:
            raise MissingArtifact(f"missing artifact {self.path(name)}")

    def _memo(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    # -- data --------------------------------------------------------------
    def dataset(self, n_classes: int | None = None) -> data.Dataset:
        K = n_classes or self.cfg.n_classes
        if K != self.cfg.n_classes:
            return self._memo(("dataset", K), lambda: self._make_dataset(K))
        return self._memo(("dataset", K), self._base_dataset)

    def _make_dataset(self, K: int) -> data.Dataset:
        X = data.synthesize(self.cfg.synthesis(K))
        return data.cluster_labels(X, K, self.cfg.seed_for("kmeans", K))

    def _base_dataset(self) -> data.Dataset:
        p = self._existing("dataset.txt", "data", "data")
        if p is not None:
            return data.load_dataset(p)
        self._need("data", "dataset.txt")
        ds = self._make_dataset(self.cfg.n_classes)
        if self.persist:
            self._write("dataset.txt", data.dumps_dataset(ds), "data")
        return ds

    def split(self, adv_fraction: float | None = None) -> data.DatasetSplit:
        f = self.cfg.adv_fraction if adv_fraction is None else adv_fraction
        make = lambda: data.make_splits(self.cfg.n_records, self.cfg.members, self.cfg.non_members,
                                        f, self.cfg.seed_for("split"))
        if f != self.cfg.adv_fraction:
            return self._memo(("split", f), make)

        def base():
            p = self._existing("split.txt", "data", "data")
            if p is not None:
                return data.loads_split(p.read_text())
            self._need("data", "split.txt")
            sp = make()
            if self.persist:
                self._write("split.txt", data.dumps_split(sp), "data")
            return sp

        return self._memo(("split", f), base)

    def synthesize_files(self) -> None:
        self.dataset()
        self.split()

    # -- models ------------------------------------------------------------
    def target(self, n_classes: int | None = None) -> target.TargetModel:
        K = n_classes or self.cfg.n_classes

        def make():
            ds = self.dataset(K)
            spec = target.target_spec(ds.n_features, K, self.cfg.target_hidden)
            log.info("training target model (K=%d)", K)
            return target.train_target(ds, self.split().member, spec, self.cfg.target_train(K))

        if K != self.cfg.n_classes:
            return self._memo(("target", K), make)

        def base():
            p = self._existing("target.ckpt", "target", "target")
            if p is not None:
                return target.load(p)
            self._need("target", "target.ckpt")
            m = make()
            if self.persist:
                self._write("target.ckpt", target.dumps(m), "target")
            return m

        return self._memo(("target", K), base)

    def _mim_training_set(self, cfg: mim.MimVariantConfig, K: int, f: float) -> mim.MembershipData:
        ds, sp, tm = self.dataset(K), self.split(f), self.target(K)
        if cfg.name == "substitute":
            return mim.build_mim_training_set(tm, ds, sp.sub_member, sp.sub_non_member,
                                              self.cfg.seed_for("mim.balance"))
        if cfg.non_member_source is mim.NonMemberSource.SHIFTED:
            return self._shifted_training_set(K, f)
        return mim.build_mim_training_set(tm, ds, sp.adv_member, sp.adv_non_member,
                                          self.cfg.seed_for("mim.balance"))

    def shifted_features(self, n: int) -> np.ndarray:
        syn = dataclasses.replace(self.cfg.synthesis(), n_records=n).shifted(
            self.cfg.mim3_flip_prob, self.cfg.seed_for("mim3.shift"))
        return data.synthesize(syn)

    def _shifted_training_set(self, K: int, f: float) -> mim.MembershipData:
        """Adversary members plus non-members drawn from a noisier source.

        Shifted records get the label of the nearest class mean of the real data.
        """
        ds, sp, tm = self.dataset(K), self.split(f), self.target(K)
        X = self.shifted_features(len(sp.adv_non_member))
        means = np.stack([ds.features[ds.labels == k].mean(axis=0) for k in range(K)])
        labels = data.nearest_centroid_labels(X, means)
        ids = self.cfg.n_records + np.arange(len(X))
        shifted = mim.MembershipData(target.predict(tm, X), target.one_hot(labels, K),
                                     np.zeros(len(X), dtype=np.int64), labels, ids)
        members = mim.membership_data(tm, ds, sp.adv_member, 1)
        return mim.MembershipData.concat([members, shifted])

    def mim(self, name: str, n_classes: int | None = None, adv_fraction: float | None = None):
        cfg = mim.variant_config(name)
        K = n_classes or self.cfg.n_classes
        f = self.cfg.adv_fraction if adv_fraction is None else adv_fraction

        def make():
            log.info("training %s (K=%d, adv_fraction=%g)", cfg.name, K, f)
            tr = self._mim_training_set(cfg, K, f)
            return mim.train_mim(cfg, tr, self.cfg.mim_train(cfg.name, K))

        if K != self.cfg.n_classes or f != self.cfg.adv_fraction:
            return self._memo(("mim", cfg.name, K, f), make)
        fname = f"{cfg.name.lower()}.ckpt"

        def base():
            kind = "substitute" if cfg.name == "substitute" else "mim"
            p = self._existing(fname, "mim", kind)
            if p is not None:
                return mim.load(p)
            self._need(kind, fname)
            m = make()
            if self.persist:
                self._write(fname, mim.dumps(m), "mim")
            return m

        return self._memo(("mim", cfg.name, K, f), base)

    def substitute(self, n_classes: int | None = None):
        return self.mim("substitute", n_classes)

    # -- evaluation --------------------------------------------------------
    def eval_data(self, n_classes: int | None = None, adv_fraction: float | None = None):
        K = n_classes or self.cfg.n_classes
        f = self.cfg.adv_fraction if adv_fraction is None else adv_fraction

        def make():
            sp = self.split(f)
            if len(sp.eval_member) == 0 or len(sp.eval_non_member) == 0:
                raise ValueError("adversary holds every record; no held-out evaluation set")
            return mim.build_mim_training_set(self.target(K), self.dataset(K), sp.eval_member,
                                              sp.eval_non_member, self.cfg.seed_for("eval.balance"))

        return self._memo(("eval", K, f), make)

    def epsilon(self) -> float:
        if self.cfg.epsilon != "auto":
            return float(self.cfg.epsilon)
        p = self.path("sweep_epsilon.selected")
        if p.exists():
            fields = dict(ln.split("=", 1) for ln in p.read_text().splitlines() if "=" in ln)
            if fields.get("config") == self.cfg.fingerprint("sweep"):
                return float(fields["epsilon"])
        raise MissingArtifact("defense.epsilon=auto needs a prior 'sweep --axis epsilon' run")

    def defense_config(self, epsilon: float | None = None, seed_name: str = "defense") -> dfn.DefenseConfig:
        eps = self.epsilon() if epsilon is None else epsilon
        return dfn.DefenseConfig(eps, self.cfg.iterations, self.cfg.seed_for(seed_name),
                                 self.cfg.renormalize)

    def defended(self, epsilon: float | None = None, n_classes: int | None = None,
                 adv_fraction: float | None = None) -> dfn.DefendedBatch:
        """The defended prediction store for the evaluation records."""
        dcfg = self.defense_config(epsilon)
        K = n_classes or self.cfg.n_classes
        f = self.cfg.adv_fraction if adv_fraction is None else adv_fraction

        def make():
            ev = self.eval_data(K, f)
            return dfn.defend(ev.predictions, self.substitute(K), dcfg, ev.record_ids,
                              threads=self.threads)

        if K != self.cfg.n_classes or f != self.cfg.adv_fraction:
            return self._memo(("defended", dcfg, K, f), make)
        fname = f"defended_eps={dcfg.epsilon!r}.npy"

        def base():
            p = self._existing(fname, "defended", "defended")
            ev = self.eval_data()
            if p is not None:
                adv = np.load(p)
                Y = dfn.one_hot_argmax(ev.predictions)
                dec = mim.decide(mim.mim_forward(self.substitute(), ev.predictions, Y))
                return dfn.DefendedBatch(ev.predictions, adv, dfn.perturbation_size(ev.predictions, adv), dec)
            self._need("defended", fname)
            b = make()
            if self.persist:
                buf = io.BytesIO()
                np.save(buf, b.adversarial)
                self._write(fname, buf.getvalue(), "defended")
                self.path(f"defended_eps={dcfg.epsilon!r}.run").write_text(
                    dfn.manifest(dcfg, self.substitute(), b, self.cfg.fingerprint()))
            return b

        return self._memo(("defended", dcfg, K, f), base)

    def evaluate(self, name: str = "MIM0", defended: bool = False, epsilon: float | None = None,
                 n_classes: int | None = None, adv_fraction: float | None = None) -> evaluation.AttackReport:
        ev = self.eval_data(n_classes, adv_fraction)
        store = self.defended(epsilon, n_classes, adv_fraction) if defended else None
        notes = {}
        if store is not None:
            notes["epsilon"] = repr(self.defense_config(epsilon).epsilon)
        return evaluation.evaluate_attack(self.mim(name, n_classes, adv_fraction), ev, store,
                                          self.cfg.fingerprint(), notes=notes)

    def loss_curve(self, name: str = "MIM0", epsilon: float | None = None) -> list[float]:
        ev = self.eval_data()
        return evaluation.capture_loss_curve(self.mim(name), ev, self.substitute(),
                                             self.defense_config(epsilon), ev.record_ids,
                                             mim.variant_config(name).loss)

    # -- sweeps ------------------------------------------------------------
    def sweep_epsilon(self) -> tuple[list[SweepRow], float]:
        """Defended MIM0 metrics per grid epsilon, and the epsilon that puts
        accuracy and precision closest to 0.5."""
        def make():
            rows = []
            for eps in self.cfg.sweep_epsilons:
                r = self.evaluate("MIM0", defended=True, epsilon=eps)
                rows.append(SweepRow(eps, r.perturbation_stats[0], r.inference_accuracy,
                                     r.precision, r.recall))
            best = select_epsilon(rows)
            if self.persist:
                self.out.mkdir(parents=True, exist_ok=True)
                self.path("sweep_epsilon.selected").write_text(
                    f"epsilon={best!r}\nconfig={self.cfg.fingerprint('sweep')}\n")
            return rows, best

        return self._memo(("sweep", "epsilon"), make)

    def sweep_classes(self) -> list[SweepRow]:
        rows = []
        for K in self.cfg.sweep_classes:
            ds, sp, tm = self.dataset(K), self.split(), self.target(K)
            off = self.evaluate("MIM0", False, n_classes=K)
            on = self.evaluate("MIM0", True, n_classes=K)
            extra = {
                "train_accuracy": target.model_accuracy(tm, ds.features[sp.member], ds.labels[sp.member]),
                "test_accuracy": target.model_accuracy(tm, ds.features[sp.non_member], ds.labels[sp.non_member]),
                "undefended_accuracy": off.inference_accuracy,
                "undefended_precision": off.precision,
                "undefended_recall": off.recall,
            }
            rows.append(SweepRow(K, on.perturbation_stats[0], on.inference_accuracy, on.precision,
                                 on.recall, extra))
        return rows

    def sweep_adv_fraction(self) -> list[SweepRow]:
        rows = []
        for f in self.cfg.sweep_adv_fractions:
            off = self.evaluate("MIM0", False, adv_fraction=f)
            on = self.evaluate("MIM0", True, adv_fraction=f)
            extra = {"undefended_accuracy": off.inference_accuracy,
                     "undefended_precision": off.precision,
                     "undefended_recall": off.recall}
            rows.append(SweepRow(f, on.perturbation_stats[0], on.inference_accuracy, on.precision,
                                 on.recall, extra))
        return rows

    # -- adaptive attacks ----------------------------------------------------
    def adaptive(self, kind: str):
        ev = self.eval_data()
        store = self.defended()
        fp = self.cfg.fingerprint()
        if kind == "flip":
            base = self.evaluate("MIM0", defended=True)
            return adaptive.flip_report(base, ev)
        if kind == "rounding":
            return adaptive.rounding_attack(
                self.target(), self.substitute(), self.dataset(), self.split(),
                self.cfg.rounding_decimals, mim.MIM0, self.cfg.mim_train("rounding"),
                self.defense_config(seed_name="defense.adversary_queries"), ev, store, fp)
        if kind in ("adv_training", "adversarial_training"):
            return self._memo(("adv_training",), lambda: adaptive.adversarial_training_attack(
                self.target(), self.dataset(), self.split(), mim.MIM0,
                self.cfg.mim_train("adv_training"),
                self.defense_config(seed_name="attacker.defense"), ev, store,
                attacker_model=self.mim("MIM0"), fingerprint=fp))
        raise ValueError(f"unknown adaptive attack {kind!r}")


def select_epsilon(rows: list[SweepRow]) -> float:
    """Smallest positive epsilon minimising max(|acc - .5|, |precision - .5|)."""
    def gap(r: SweepRow) -> float:
        p = 0.0 if r.precision is None else r.precision
        return max(abs(r.accuracy - 0.5), abs(p - 0.5))

    candidates = [r for r in rows if r.value > 0]
    if not candidates:
        raise ValueError("epsilon grid has no positive value")
    return min(candidates, key=lambda r: (gap(r), r.value)).value


def sweep_csv(axis: str, rows: list[SweepRow], fingerprint: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config={fingerprint}\n")
    w = csv.writer(buf, lineterminator="\n")
    extra_keys = sorted(rows[0].extra) if rows and rows[0].extra else []
    w.writerow([axis, "l1_mean", "accuracy", "precision", "recall", *extra_keys])
    for r in rows:
        w.writerow([_fmt(r.value), _fmt(r.l1_mean), _fmt(r.accuracy), _fmt(r.precision),
                    _fmt(r.recall), *(_fmt(r.extra[k]) for k in extra_keys)])
    return buf.getvalue()
