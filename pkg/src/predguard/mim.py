"""Membership inference models.

A composite model has three sub-networks: a prediction net over the
confidence vector, a label net over the one-hot true label, and a connection
net over their concatenated features ending in a single sigmoid unit. The
sub-networks end in a linear layer; the shared hidden activation is applied
to the concatenation before the connection net, so the composite behaves as
if each sub-network's last layer were activated.

The flat variant is a single network over ``[prediction, label]``.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .target import TargetModel, one_hot, predict


class Variant(str, enum.Enum):
    COMPOSITE = "composite"
    FLAT = "flat"


class NonMemberSource(str, enum.Enum):
    SAME = "same_distribution"
    SHIFTED = "shifted_distribution"


@dataclass
class MembershipInferenceNet:
    connection_net: nn.DenseNet
    prediction_net: nn.DenseNet | None = None
    label_net: nn.DenseNet | None = None
    name: str = "mim"

    def __post_init__(self):
        conn = self.connection_net.spec
        if conn.output_head is not nn.Head.SIGMOID:
            raise ValueError("connection net must end in a sigmoid unit")
        if self.variant is Variant.COMPOSITE:
            p, l = self.prediction_net.spec, self.label_net.spec
            if p.n_in != l.n_in:
                raise nn.ShapeError("prediction and label nets must share the class count")
            if conn.n_in != p.n_out + l.n_out:
                raise nn.ShapeError(
                    f"connection input {conn.n_in} != {p.n_out} + {l.n_out}")
        elif self.prediction_net is not None or self.label_net is not None:
            raise ValueError("flat model takes only a connection net")
        elif conn.n_in % 2:
            raise nn.ShapeError("flat model input must be 2K wide")

    @property
    def variant(self) -> Variant:
        return Variant.FLAT if self.prediction_net is None else Variant.COMPOSITE

    @property
    def n_classes(self) -> int:
        if self.variant is Variant.FLAT:
            return self.connection_net.spec.n_in // 2
        return self.prediction_net.spec.n_in

    @property
    def activation(self) -> nn.Activation:
        return self.connection_net.spec.hidden_activation

    def nets(self) -> list[nn.DenseNet]:
        if self.variant is Variant.FLAT:
            return [self.connection_net]
        return [self.prediction_net, self.label_net, self.connection_net]

    def copy(self) -> "MembershipInferenceNet":
        if self.variant is Variant.FLAT:
            return MembershipInferenceNet(self.connection_net.copy(), name=self.name)
        return MembershipInferenceNet(self.connection_net.copy(), self.prediction_net.copy(),
                                      self.label_net.copy(), self.name)

    def __eq__(self, other):
        if not isinstance(other, MembershipInferenceNet):
            return NotImplemented
        return self.name == other.name and self.nets() == other.nets()


@dataclass(frozen=True)
class MembershipRecord:
    label_onehot: np.ndarray
    prediction: np.ndarray
    membership: int


@dataclass
class MembershipData:
    """Column-wise batch of membership records."""

    predictions: np.ndarray
    labels_onehot: np.ndarray
    membership: np.ndarray
    classes: np.ndarray = field(default=None)
    record_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.labels_onehot = np.asarray(self.labels_onehot, dtype=np.float64)
        self.membership = np.asarray(self.membership, dtype=np.int64)
        if self.classes is None:
            self.classes = np.argmax(self.labels_onehot, axis=1)
        if self.record_ids is None:
            self.record_ids = np.arange(len(self.membership))
        n = len(self.membership)
        if self.predictions.shape[0] != n or self.labels_onehot.shape[0] != n:
            raise nn.ShapeError("membership columns differ in length")

    def __len__(self):
        return len(self.membership)

    def __getitem__(self, i) -> MembershipRecord:
        return MembershipRecord(self.labels_onehot[i], self.predictions[i], int(self.membership[i]))

    def take(self, idx) -> "MembershipData":
        return MembershipData(self.predictions[idx], self.labels_onehot[idx],
                              self.membership[idx], self.classes[idx], self.record_ids[idx])

    def with_predictions(self, predictions: np.ndarray) -> "MembershipData":
        return MembershipData(predictions, self.labels_onehot, self.membership, self.classes,
                              self.record_ids)

    @staticmethod
    def concat(parts: list["MembershipData"]) -> "MembershipData":
        return MembershipData(np.concatenate([p.predictions for p in parts]),
                              np.concatenate([p.labels_onehot for p in parts]),
                              np.concatenate([p.membership for p in parts]),
                              np.concatenate([p.classes for p in parts]),
                              np.concatenate([p.record_ids for p in parts]))


# ---------------------------------------------------------------------------
# architectures

@dataclass(frozen=True)
class MimVariantConfig:
    name: str
    loss: nn.LossKind = nn.LossKind.BINARY_CROSS_ENTROPY
    prediction_sizes: tuple[int, ...] | None = (1024, 512, 64)
    label_sizes: tuple[int, ...] | None = (512, 64)
    connection_sizes: tuple[int, ...] = (256, 64, 1)
    activation: nn.Activation = nn.Activation.RELU
    non_member_source: NonMemberSource = NonMemberSource.SAME

    def __post_init__(self):
        object.__setattr__(self, "loss", nn.LossKind(self.loss))
        object.__setattr__(self, "non_member_source", NonMemberSource(self.non_member_source))
        if self.loss not in (nn.LossKind.BINARY_CROSS_ENTROPY, nn.LossKind.L2):
            raise ValueError("membership models use binary_cross_entropy or l2")
        if (self.prediction_sizes is None) != (self.label_sizes is None):
            raise ValueError("composite models need both prediction and label sizes")
        if self.connection_sizes[-1] != 1:
            raise ValueError("connection net must end in one unit")

    @property
    def variant(self) -> Variant:
        return Variant.FLAT if self.prediction_sizes is None else Variant.COMPOSITE


# Widths exclude the input layer (always K, or 2K for the flat model).
MIM0 = MimVariantConfig("MIM0")
MIM1 = MimVariantConfig("MIM1", prediction_sizes=None, label_sizes=None,
                        connection_sizes=(1024, 512, 256, 1))
MIM2 = MimVariantConfig("MIM2", loss=nn.LossKind.L2)
MIM3 = MimVariantConfig("MIM3", non_member_source=NonMemberSource.SHIFTED)
SUBSTITUTE = MimVariantConfig("substitute", prediction_sizes=(256,), label_sizes=(256,),
                              connection_sizes=(64, 1))

VARIANTS = {c.name: c for c in (MIM0, MIM1, MIM2, MIM3, SUBSTITUTE)}


def variant_config(name: str) -> MimVariantConfig:
    key = {"mim0": "MIM0", "mim1": "MIM1", "mim2": "MIM2", "mim3": "MIM3"}.get(name.lower(), name)
    try:
        return VARIANTS[key]
    except KeyError:
        raise ValueError(f"unknown membership model variant {name!r}") from None


def init_mim(cfg: MimVariantConfig, n_classes: int, rng: np.random.Generator) -> MembershipInferenceNet:
    act = cfg.activation
    if cfg.variant is Variant.FLAT:
        spec = nn.DenseNetSpec((2 * n_classes, *cfg.connection_sizes), act, nn.Head.SIGMOID)
        return MembershipInferenceNet(nn.init_net(spec, rng), name=cfg.name)
    p = nn.init_net(nn.DenseNetSpec((n_classes, *cfg.prediction_sizes), act, nn.Head.LINEAR), rng)
    l = nn.init_net(nn.DenseNetSpec((n_classes, *cfg.label_sizes), act, nn.Head.LINEAR), rng)
    width = cfg.prediction_sizes[-1] + cfg.label_sizes[-1]
    c = nn.init_net(nn.DenseNetSpec((width, *cfg.connection_sizes), act, nn.Head.SIGMOID), rng)
    return MembershipInferenceNet(c, p, l, cfg.name)


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class _Pass:
    conn: nn.Cache
    pred: nn.Cache | None = None
    label: nn.Cache | None = None
    joint_pre: np.ndarray | None = None


def _as_rows(x, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise nn.ShapeError(f"expected width {width}, got {x.shape[-1]}")
    return x, single


def _run(net: MembershipInferenceNet, P: np.ndarray, L: np.ndarray) -> _Pass:
    if net.variant is Variant.FLAT:
        return _Pass(nn.forward_cache(net.connection_net, np.hstack([P, L])))
    pc = nn.forward_cache(net.prediction_net, P)
    lc = nn.forward_cache(net.label_net, L)
    joint = np.hstack([pc.output, lc.output])
    h = nn.activate(net.activation, joint)
    return _Pass(nn.forward_cache(net.connection_net, h), pc, lc, joint)


def _back(net: MembershipInferenceNet, ps: _Pass, dlogits: np.ndarray, need_params: bool):
    """Returns (grads per sub-net as [(dw, db), ...], d/dprediction)."""
    dwc, dbc, dh = nn.backward(net.connection_net, ps.conn, dlogits, need_params)
    if net.variant is Variant.FLAT:
        K = net.n_classes
        return [(dwc, dbc)], dh[:, :K]
    h = ps.conn.inputs
    djoint = dh * nn.activation_grad(net.activation, ps.joint_pre, h)
    wp = net.prediction_net.spec.n_out
    dwp, dbp, dP = nn.backward(net.prediction_net, ps.pred, djoint[:, :wp], need_params)
    grads = [(dwp, dbp)]
    if need_params:
        dwl, dbl, _ = nn.backward(net.label_net, ps.label, djoint[:, wp:], True)
        grads.append((dwl, dbl))
    grads.append((dwc, dbc))
    return grads, dP


def mim_forward(net: MembershipInferenceNet, prediction, label_onehot):
    """Membership probability for one (prediction, label) pair or a batch."""
    K = net.n_classes
    P, single = _as_rows(prediction, K)
    L, _ = _as_rows(label_onehot, K)
    if len(P) != len(L):
        raise nn.ShapeError("prediction and label batches differ in length")
    out = _run(net, P, L).conn.output[:, 0]
    return float(out[0]) if single else out


def mim_loss(net: MembershipInferenceNet, prediction, label_onehot, target, kind: nn.LossKind) -> np.ndarray:
    """Per-sample loss of the model output against ``target`` bits."""
    K = net.n_classes
    P, _ = _as_rows(prediction, K)
    L, _ = _as_rows(label_onehot, K)
    c = _run(net, P, L).conn
    t = np.asarray(target, dtype=np.float64).reshape(-1, 1) * np.ones((len(P), 1))
    return nn.loss_value(nn.Head.SIGMOID, kind, c.logits, c.output, t)


def mim_input_gradient(net: MembershipInferenceNet, prediction, label_onehot, target,
                       kind: nn.LossKind = nn.LossKind.BINARY_CROSS_ENTROPY):
    """Exact d loss / d prediction, per row."""
    K = net.n_classes
    P, single = _as_rows(prediction, K)
    L, _ = _as_rows(label_onehot, K)
    ps = _run(net, P, L)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 1) * np.ones((len(P), 1))
    g = nn.logit_grad(nn.Head.SIGMOID, kind, ps.conn.logits, ps.conn.output, t)
    _, dP = _back(net, ps, g, need_params=False)
    return dP[0] if single else dP


def mim_parameter_gradients(net: MembershipInferenceNet, prediction, label_onehot, target,
                            kind: nn.LossKind):
    """Batch-mean parameter gradients, one ``(dw, db)`` per sub-network."""
    K = net.n_classes
    P, _ = _as_rows(prediction, K)
    L, _ = _as_rows(label_onehot, K)
    ps = _run(net, P, L)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    g = nn.logit_grad(nn.Head.SIGMOID, kind, ps.conn.logits, ps.conn.output, t)
    grads, _ = _back(net, ps, g, need_params=True)
    n = len(P)
    return [([w / n for w in dw], [b / n for b in db]) for dw, db in grads]


def infer_membership(net: MembershipInferenceNet, prediction, label_onehot):
    """1 where the membership probability is at least 0.5."""
    p = mim_forward(net, prediction, label_onehot)
    return decide(p)


def decide(probability):
    if np.ndim(probability) == 0:
        return int(probability >= 0.5)
    return (np.asarray(probability) >= 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# training data and training

def membership_data(target: TargetModel, data: Dataset, idx, bit: int,
                    predictions: np.ndarray | None = None) -> MembershipData:
    idx = np.asarray(idx, dtype=np.int64)
    preds = predict(target, data.features[idx]) if predictions is None else predictions
    return MembershipData(preds, one_hot(data.labels[idx], data.n_classes),
                          np.full(len(idx), bit), data.labels[idx], idx)


def build_mim_training_set(target: TargetModel, data: Dataset, members, non_members,
                           seed: int = 0) -> MembershipData:
    """(true label, prediction, bit) rows with equal member / non-member counts.

    The larger side is subsampled without replacement.
    """
    members = np.asarray(members, dtype=np.int64)
    non_members = np.asarray(non_members, dtype=np.int64)
    if len(members) == 0 or len(non_members) == 0:
        raise ValueError("need at least one member and one non-member")
    n = min(len(members), len(non_members))
    rng = np.random.default_rng(seed)
    if len(members) > n:
        members = np.sort(rng.choice(members, n, replace=False))
    if len(non_members) > n:
        non_members = np.sort(rng.choice(non_members, n, replace=False))
    return MembershipData.concat([membership_data(target, data, members, 1),
                                  membership_data(target, data, non_members, 0)])


def train_mim(cfg: MimVariantConfig, data: MembershipData, tcfg: nn.TrainConfig,
              history: list[float] | None = None,
              init: MembershipInferenceNet | None = None) -> MembershipInferenceNet:
    """Train all sub-networks jointly, end to end."""
    if len(data) == 0:
        raise ValueError("empty membership training set")
    K = data.predictions.shape[1]
    rng = np.random.default_rng([tcfg.seed, 11])
    net = init.copy() if init is not None else init_mim(cfg, K, rng)
    nets = net.nets()
    updater = nn.ParamUpdater([p for sub in nets for p in nn.param_list(sub)], tcfg)
    bits = data.membership.astype(np.float64)[:, None]
    for epoch in range(tcfg.epochs):
        total = 0.0
        for idx in nn.batch_order(len(data), tcfg.batch_size, rng):
            ps = _run(net, data.predictions[idx], data.labels_onehot[idx])
            c = ps.conn
            total += float(nn.loss_value(nn.Head.SIGMOID, cfg.loss, c.logits, c.output, bits[idx]).sum())
            if not np.isfinite(total):
                raise nn.DivergenceError(epoch)
            g = nn.logit_grad(nn.Head.SIGMOID, cfg.loss, c.logits, c.output, bits[idx])
            grads, _ = _back(net, ps, g, need_params=True)
            n = len(idx)
            updater.step([d / n for dw, db in grads for d in (*dw, *db)])
        if history is not None:
            history.append(total / len(data))
    return net


# ---------------------------------------------------------------------------
# checkpoints

def dumps(net: MembershipInferenceNet) -> str:
    parts = [f"mim v1 name={net.name} variant={net.variant.value} nets={len(net.nets())}\n"]
    for sub in net.nets():
        parts.append(nn.dumps(sub, [f"role=mim:{net.name}"]))
    return "".join(parts)


def loads(text: str) -> MembershipInferenceNet:
    head, _, rest = text.partition("\n")
    fields = head.split()
    if fields[:2] != ["mim", "v1"]:
        raise nn.CheckpointError("missing 'mim v1' header")
    kv = dict(f.split("=", 1) for f in fields[2:])
    chunks = ["densenet v1" + c for c in rest.split("densenet v1")[1:]]
    subs = [nn.loads(c)[0] for c in chunks]
    if len(subs) != int(kv["nets"]):
        raise nn.CheckpointError("sub-network count mismatch")
    if kv["variant"] == Variant.FLAT.value:
        return MembershipInferenceNet(subs[0], name=kv["name"])
    return MembershipInferenceNet(subs[2], subs[0], subs[1], kv["name"])


def save(net: MembershipInferenceNet, path: Path) -> None:
    Path(path).write_text(dumps(net))


def load(path: Path) -> MembershipInferenceNet:
    return loads(Path(path).read_text())


def fingerprint(net: MembershipInferenceNet) -> str:
    return hashlib.sha256(dumps(net).encode()).hexdigest()
