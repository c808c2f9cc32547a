"""Experiment configuration: flat ``section.key=value`` text files.

One master seed feeds every random stream through :func:`derive_seed`.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .data import SynthesisConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def derive_seed(master: int, component: str, index: int = 0) -> int:
    """Child seed = hash(master seed, component name, index), 63 bits."""
    h = hashlib.sha256(f"{int(master)}/{component}/{int(index)}".encode()).digest()
    return int.from_bytes(h[:8], "big") & ((1 << 63) - 1)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _epsilon(text: str):
    return "auto" if text.strip() == "auto" else float(text)


def _list_text(v) -> str:
    return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)


# key -> (attribute, parser); order here is the canonical order
_FIELDS: dict[str, tuple[str, object]] = {
    "seed": ("seed", int),
    "synthesis.n_records": ("n_records", int),
    "synthesis.n_features": ("n_features", int),
    "synthesis.n_classes": ("n_classes", int),
    "synthesis.n_latent_groups": ("n_latent_groups", int),
    "synthesis.flip_prob": ("flip_prob", float),
    "split.members": ("members", int),
    "split.non_members": ("non_members", int),
    "split.adv_fraction": ("adv_fraction", float),
    "target.hidden": ("target_hidden", _ints),
    "target.learning_rate": ("target_lr", float),
    "target.epochs": ("target_epochs", int),
    "target.batch_size": ("target_batch", int),
    "target.optimizer": ("target_optimizer", nn.Optimizer),
    "mim.learning_rate": ("mim_lr", float),
    "mim.epochs": ("mim_epochs", int),
    "mim.batch_size": ("mim_batch", int),
    "mim.optimizer": ("mim_optimizer", nn.Optimizer),
    "mim3.flip_prob": ("mim3_flip_prob", float),
    "defense.epsilon": ("epsilon", _epsilon),
    "defense.iterations": ("iterations", int),
    "defense.renormalize": ("renormalize", _bool),
    "adaptive.rounding_decimals": ("rounding_decimals", int),
    "sweep.epsilons": ("sweep_epsilons", _floats),
    "sweep.classes": ("sweep_classes", _ints),
    "sweep.adv_fractions": ("sweep_adv_fractions", _floats),
    "out": ("out", str),
}

# which sections each pipeline stage depends on
_STAGES = {
    "data": ("seed", "synthesis.", "split."),
    "target": ("seed", "synthesis.", "split.", "target."),
    "mim": ("seed", "synthesis.", "split.", "target.", "mim.", "mim3."),
    "defense": ("seed", "synthesis.", "split.", "target.", "mim.", "mim3.", "defense."),
    "defended": ("seed", "synthesis.", "split.", "target.", "mim.", "defense.iterations",
                 "defense.renormalize"),
    "sweep": ("seed", "synthesis.", "split.", "target.", "mim.", "mim3.", "defense.iterations",
              "defense.renormalize", "sweep.epsilons"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_records: int = 8000
    n_features: int = 600
    n_classes: int = 100
    n_latent_groups: int = 1000
    flip_prob: float = 0.15
    members: int = 4000
    non_members: int = 4000
    adv_fraction: float = 0.5
    target_hidden: tuple[int, ...] = (1024, 512, 256)
    target_lr: float = 1e-4
    target_epochs: int = 30
    target_batch: int = 64
    target_optimizer: nn.Optimizer = nn.Optimizer.ADAM
    mim_lr: float = 1e-3
    mim_epochs: int = 30
    mim_batch: int = 64
    mim_optimizer: nn.Optimizer = nn.Optimizer.ADAM
    mim3_flip_prob: float = 0.2
    epsilon: float | str = "auto"
    iterations: int = 100
    renormalize: bool = False
    rounding_decimals: int = 3
    sweep_epsilons: tuple[float, ...] = (0.0, 1e-5, 1.5e-5, 2e-5, 2.5e-5, 3e-5)
    sweep_classes: tuple[int, ...] = (2, 10, 20, 50, 100)
    sweep_adv_fractions: tuple[float, ...] = (0.25, 0.5, 0.75)
    out: str = "runs/default"

    def __post_init__(self):
        # build the sub-configs once so invalid values fail at load time
        self.synthesis()
        self.target_train()
        self.mim_train()
        if self.members + self.non_members > self.n_records:
            raise ConfigError("split.members + split.non_members exceeds synthesis.n_records")
        if not 0 < self.adv_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", key="split.adv_fraction")
        if self.epsilon != "auto" and not self.epsilon >= 0:
            raise ConfigError("must be >= 0 or 'auto'", key="defense.epsilon")
        if self.iterations < 1:
            raise ConfigError("must be >= 1", key="defense.iterations")
        if not 0 <= self.mim3_flip_prob < 0.5:
            raise ConfigError("must lie in [0, 0.5)", key="mim3.flip_prob")

    # -- sub-configs -------------------------------------------------------
    def synthesis(self, n_classes: int | None = None) -> SynthesisConfig:
        return SynthesisConfig(self.n_records, self.n_features, n_classes or self.n_classes,
                               max(self.n_latent_groups, n_classes or 0), self.flip_prob,
                               derive_seed(self.seed, "synthesis"))

    def target_train(self, index: int = 0) -> nn.TrainConfig:
        return nn.TrainConfig(self.target_lr, self.target_epochs, self.target_batch,
                              derive_seed(self.seed, "target.train", index), self.target_optimizer)

    def mim_train(self, name: str = "MIM0", index: int = 0) -> nn.TrainConfig:
        return nn.TrainConfig(self.mim_lr, self.mim_epochs, self.mim_batch,
                              derive_seed(self.seed, f"mim.{name}.train", index), self.mim_optimizer)

    def seed_for(self, component: str, index: int = 0) -> int:
        return derive_seed(self.seed, component, index)

    # -- text form ---------------------------------------------------------
    def items(self) -> list[tuple[str, str]]:
        out = []
        for key, (attr, _) in _FIELDS.items():
            v = getattr(self, attr)
            if isinstance(v, tuple):
                text = _list_text(v)
            elif isinstance(v, nn.Optimizer):
                text = v.value
            elif isinstance(v, bool):
                text = str(v).lower()
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            out.append((key, text))
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def fingerprint(self, stage: str | None = None) -> str:
        """Hash of the canonical text; ``stage`` restricts it to upstream keys."""
        items = [(k, v) for k, v in self.items() if k != "out"]
        if stage is not None:
            prefixes = _STAGES[stage]
            items = [(k, v) for k, v in items if k.startswith(prefixes)]
        text = "".join(f"{k}={v}\n" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", line=n)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError("unknown key", line=n, key=key)
        attr, parse = _FIELDS[key]
        try:
            values[attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} ({exc})", line=n, key=key) from None
    try:
        return dataclasses.replace(base or ExperimentConfig(), **values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path: Path) -> ExperimentConfig:
    return loads(Path(path).read_text())
