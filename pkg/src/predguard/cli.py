"""Command-line entry point: ``predguard <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import adaptive, config, defense as dfn, evaluation, experiment, mim, nn, target

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("predguard")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="predguard", description=(
        "Synthetic membership-inference experiments with an adversarial-perturbation defense."))
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", type=Path, help="override the output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--diagnostics", action="store_true", help="capture the loss curve when evaluating")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write dataset.txt and split.txt")
    t = sub.add_parser("train", help="train one model and write its checkpoint")
    t.add_argument("--role", required=True, help="target | substitute | mim:<mim0..mim3>")
    e = sub.add_parser("evaluate", help="score an attack model with or without the defense")
    e.add_argument("--defense", choices=("on", "off"), required=True)
    e.add_argument("--attack", choices=("mim0", "mim1", "mim2", "mim3"), default="mim0")
    e.add_argument("--epsilon", type=float, help="override defense.epsilon")
    s = sub.add_parser("sweep", help="write one CSV row per grid point")
    s.add_argument("--axis", choices=("epsilon", "classes", "adv_fraction"), required=True)
    a = sub.add_parser("adaptive", help="run an adaptive attack against the defended store")
    a.add_argument("--kind", choices=("flip", "rounding", "adv_training"), required=True)
    sub.add_parser("report", help="collect every report in the output directory into summary.csv")
    return p


def _config(args) -> config.ExperimentConfig:
    cfg = config.load(args.config) if args.config else config.ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if getattr(args, "epsilon", None) is not None:
        changes["epsilon"] = args.epsilon
    return cfg.replace(**changes) if changes else cfg


def _role(text: str) -> tuple[str, str]:
    if text in ("target", "substitute"):
        return text, text
    if text.startswith("mim:"):
        try:
            return "mim", mim.variant_config(text[4:]).name
        except ValueError:
            pass
    raise UsageError(f"unknown role {text!r}; expected target, substitute or mim:<mim0..mim3>")


def cmd_synth(lab: experiment.Lab, args) -> None:
    lab.synthesize_files()
    print(lab.path("dataset.txt"))
    print(lab.path("split.txt"))


def cmd_train(lab: experiment.Lab, args) -> None:
    kind, name = _role(args.role)
    if kind == "target":
        lab.target()
        out = lab.path("target.ckpt")
    else:
        lab.mim(name)
        out = lab.path(f"{name.lower()}.ckpt")
    print(out)


def cmd_evaluate(lab: experiment.Lab, args) -> None:
    on = args.defense == "on"
    report = lab.evaluate(args.attack.upper(), defended=on)
    if on:
        store = lab.defended()
        ev = lab.eval_data()
        outside = ev.membership == 0
        report.notes["top1_agreement"] = format(store.top1_agreement(), ".17g")
        report.notes["test_accuracy_clean"] = format(
            target.top1_accuracy(store.original[outside], ev.classes[outside]), ".17g")
        report.notes["test_accuracy_defended"] = format(
            target.top1_accuracy(store.adversarial[outside], ev.classes[outside]), ".17g")
    stem = f"{args.attack}_{args.defense}"
    for p in evaluation.write_report(report, lab.out, stem):
        print(p)
    if on and args.diagnostics:
        curve = lab.loss_curve(args.attack.upper())
        p = lab.path(f"{stem}.loss_curve.csv")
        p.write_text(f"# config={lab.cfg.fingerprint()}\niteration,mean_loss\n" + "".join(
            f"{t + 1},{v:.17g}\n" for t, v in enumerate(curve)))
        print(p)


def cmd_sweep(lab: experiment.Lab, args) -> None:
    axis = args.axis
    grid = {"epsilon": lab.cfg.sweep_epsilons, "classes": lab.cfg.sweep_classes,
            "adv_fraction": lab.cfg.sweep_adv_fractions}[axis]
    if not grid:
        raise UsageError(f"the sweep grid for {axis!r} is empty")
    if axis == "adv_fraction" and max(grid) >= 1.0:
        raise UsageError("sweep.adv_fractions must stay below 1 so that held-out records remain")
    if axis == "epsilon":
        rows, best = lab.sweep_epsilon()
        print(f"selected epsilon={best!r}")
    elif axis == "classes":
        rows = lab.sweep_classes()
    else:
        rows = lab.sweep_adv_fraction()
    p = lab.path(f"sweep_{axis}.csv")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(experiment.sweep_csv(axis, rows, lab.cfg.fingerprint()))
    print(p)


def cmd_adaptive(lab: experiment.Lab, args) -> None:
    result = lab.adaptive(args.kind)
    report = result.report if isinstance(result, adaptive.AdversarialTrainingResult) else result
    for p in evaluation.write_report(report, lab.out, f"adaptive_{args.kind}"):
        print(p)


def cmd_report(lab: experiment.Lab, args) -> None:
    paths = sorted(lab.out.glob("*.report"))
    if not paths:
        raise experiment.MissingArtifact(f"no reports in {lab.out}")
    rows = [(p.name, evaluation.loads_report_summary(p.read_text())) for p in paths]
    prints = {r["config"] for _, r in rows}
    if len(prints) > 1:
        detail = ", ".join(f"{n}={r['config']}" for n, r in rows)
        raise UsageError(f"reports come from different configs and cannot be compared: {detail}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["attack", "defended", "inference_accuracy", "precision", "recall", "l1_mean"]
    w.writerow(["file", *cols])
    for name, r in rows:
        w.writerow([name, *(r.get(c, "absent") for c in cols)])
    p = lab.path("summary.csv")
    p.write_text(f"# config={prints.pop()}\n" + buf.getvalue())
    print(p)


# which artifacts each subcommand may produce; anything else must already exist
_BUILDS = {
    "synth": {"data"},
    "evaluate": {"defended"},
    "sweep": {"defended"},
    "adaptive": set(),
    "report": set(),
}

_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate,
             "sweep": cmd_sweep, "adaptive": cmd_adaptive, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        builds = _BUILDS.get(args.command)
        if builds is None:
            kind, _ = _role(args.role)
            builds = {kind}
        lab = experiment.Lab(cfg, threads=args.threads, build=builds)
        _COMMANDS[args.command](lab, args)
    except (config.ConfigError, UsageError) as exc:
        print(f"predguard: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (experiment.MissingArtifact, experiment.FingerprintMismatch) as exc:
        print(f"predguard: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (nn.DivergenceError, dfn.DefenseError) as exc:
        print(f"predguard: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except nn.CheckpointError as exc:
        print(f"predguard: unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as exc:
        print(f"predguard: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
