"""The classifier under attack: training, prediction, accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset

# Hidden widths of the fully connected Purchase classifier; input width F and
# output width K are filled in per dataset.
TARGET_HIDDEN = (1024, 512, 256)


def target_spec(n_features: int, n_classes: int, hidden=TARGET_HIDDEN) -> nn.DenseNetSpec:
    return nn.DenseNetSpec((n_features, *hidden, n_classes), nn.Activation.TANH, nn.Head.SOFTMAX)


@dataclass
class TargetModel:
    net: nn.DenseNet
    train_meta: nn.TrainConfig

    def __post_init__(self):
        if self.net.spec.output_head is not nn.Head.SOFTMAX:
            raise ValueError("target model needs a softmax head")

    @property
    def n_features(self) -> int:
        return self.net.spec.n_in

    @property
    def n_classes(self) -> int:
        return self.net.spec.n_out


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train_target(data: Dataset, members, spec: nn.DenseNetSpec, cfg: nn.TrainConfig,
                 history: list[float] | None = None) -> TargetModel:
    """Fit the classifier on the member records only."""
    if spec.n_out != data.n_classes:
        raise ValueError(f"spec output width {spec.n_out} != number of classes {data.n_classes}")
    if spec.n_in != data.n_features:
        raise ValueError(f"spec input width {spec.n_in} != feature count {data.n_features}")
    members = np.asarray(members, dtype=np.int64)
    rng = np.random.default_rng([cfg.seed, 7])
    net = nn.init_net(spec, rng)
    net = nn.train(net, data.features[members], one_hot(data.labels[members], data.n_classes),
                   nn.LossKind.CROSS_ENTROPY, cfg, history=history)
    return TargetModel(net, cfg)


def predict(model: TargetModel, features) -> np.ndarray:
    """Softmax confidence vector(s) for one record or a batch."""
    return nn.forward(model.net, features)


def model_accuracy(model: TargetModel, features, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty record set is undefined")
    return top1_accuracy(predict(model, features), labels)


def top1_accuracy(predictions: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty record set is undefined")
    return float(np.mean(np.argmax(predictions, axis=1) == labels))


def dumps(model: TargetModel) -> str:
    c = model.train_meta
    notes = ["role=target",
             f"train lr={c.learning_rate!r} epochs={c.epochs} batch={c.batch_size} seed={c.seed}"]
    return nn.dumps(model.net, notes)


def save(model: TargetModel, path: Path) -> None:
    Path(path).write_text(dumps(model))


def load(path: Path) -> TargetModel:
    net, notes = nn.loads(Path(path).read_text())
    if "role=target" not in notes:
        raise nn.CheckpointError(f"{path} is not a target-model checkpoint")
    meta = nn.TrainConfig()
    for n in notes:
        if n.startswith("train "):
            kv = dict(p.split("=") for p in n.split()[1:])
            meta = nn.TrainConfig(float(kv["lr"]), int(kv["epochs"]), int(kv["batch"]), int(kv["seed"]))
    return TargetModel(net, meta)
