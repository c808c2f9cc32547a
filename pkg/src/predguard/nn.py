"""Small deterministic dense-network engine.

Everything is float64 numpy. Weights are stored ``(out, in)`` so a layer
computes ``z = W @ x + b``; batched code uses row-major batches and
``X @ W.T``.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array widths do not match a network's layout."""


class DivergenceError(ArithmeticError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"


class Head(str, enum.Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    LINEAR = "linear"


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"
    L2 = "l2"


@dataclass(frozen=True)
class DenseNetSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: Activation = Activation.TANH
    output_head: Head = Head.SOFTMAX

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_head", Head(self.output_head))
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs an input width and at least one layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer widths must be positive: {sizes}")
        if self.output_head is Head.SIGMOID and sizes[-1] != 1:
            raise ValueError("sigmoid head requires a single output unit")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    optimizer: Optimizer = Optimizer.ADAM

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class DenseNet:
    spec: DenseNetSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("number of parameter arrays does not match spec")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]):
                raise ShapeError(f"layer {i}: weight shape {w.shape}, expected {(sizes[i + 1], sizes[i])}")
            if b.shape != (sizes[i + 1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape}, expected {(sizes[i + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "DenseNet":
        return DenseNet(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __eq__(self, other):
        if not isinstance(other, DenseNet):
            return NotImplemented
        return (
            self.spec == other.spec
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def __call__(self, x):
        return forward(self, x)


def init_net(spec: DenseNetSpec, rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(spec, weights, biases)


# ---------------------------------------------------------------------------
# activations and heads

def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return 1.0 - a * a
    # relu'(0) = 0
    return (z > 0.0).astype(np.float64)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def apply_head(head: Head, z: np.ndarray) -> np.ndarray:
    if head is Head.SOFTMAX:
        return softmax(z)
    if head is Head.SIGMOID:
        return sigmoid(z)
    return z.copy()


# ---------------------------------------------------------------------------
# forward / backward primitives (batched, rows are samples)

@dataclass
class Cache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None
    output: np.ndarray | None = None


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.spec.n_in:
        raise ShapeError(f"input width {x.shape[-1]} does not match network input {net.spec.n_in}")
    return x, single


def forward_cache(net: DenseNet, X: np.ndarray) -> Cache:
    """Run a batch forward and keep the intermediates backprop needs."""
    cache = Cache(inputs=X)
    h = X
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if i == last:
            cache.logits = z
            break
        h = activate(net.spec.hidden_activation, z)
        cache.pre.append(z)
        cache.post.append(h)
    cache.output = apply_head(net.spec.output_head, cache.logits)
    return cache


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    X, single = _as_batch(net, x)
    out = forward_cache(net, X).output
    return out[0] if single else out


def _check_loss(head: Head, loss: LossKind) -> None:
    if loss is LossKind.CROSS_ENTROPY and head is not Head.SOFTMAX:
        raise ValueError("cross_entropy requires a softmax head")
    if loss is LossKind.BINARY_CROSS_ENTROPY and head is not Head.SIGMOID:
        raise ValueError("binary_cross_entropy requires a sigmoid head")


def loss_value(head: Head, loss: LossKind, logits: np.ndarray, output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample loss, computed from logits where that is more stable."""
    head, loss = Head(head), LossKind(loss)
    _check_loss(head, loss)
    if loss is LossKind.CROSS_ENTROPY:
        m = logits.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        return -(target * (logits - lse)).sum(axis=1)
    if loss is LossKind.BINARY_CROSS_ENTROPY:
        z = logits[:, 0]
        t = target[:, 0]
        return np.logaddexp(0.0, z) - t * z
    return ((output - target) ** 2).sum(axis=1)


def logit_grad(head: Head, loss: LossKind, logits: np.ndarray, output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample dLoss/dlogits (not averaged over the batch)."""
    head, loss = Head(head), LossKind(loss)
    _check_loss(head, loss)
    if loss is LossKind.CROSS_ENTROPY:
        return output * target.sum(axis=1, keepdims=True) - target
    if loss is LossKind.BINARY_CROSS_ENTROPY:
        return output - target
    g = 2.0 * (output - target)
    if head is Head.LINEAR:
        return g
    if head is Head.SIGMOID:
        return g * output * (1.0 - output)
    return output * (g - (g * output).sum(axis=1, keepdims=True))


def backward(net: DenseNet, cache: Cache, dlogits: np.ndarray, need_params: bool = True):
    """Backpropagate ``dlogits`` (batch x n_out) through the network.

    Returns ``(weight_grads, bias_grads, input_grad)``; parameter gradients are
    summed over the batch and are ``None`` when ``need_params`` is false.
    """
    act = net.spec.hidden_activation
    dw: list[np.ndarray | None] = [None] * net.n_layers
    db: list[np.ndarray | None] = [None] * net.n_layers
    delta = dlogits
    for i in range(net.n_layers - 1, -1, -1):
        h_in = cache.inputs if i == 0 else cache.post[i - 1]
        if need_params:
            dw[i] = delta.T @ h_in
            db[i] = delta.sum(axis=0)
        dh = delta @ net.weights[i]
        if i > 0:
            delta = dh * activation_grad(act, cache.pre[i - 1], cache.post[i - 1])
        else:
            delta = dh
    return (dw if need_params else None), (db if need_params else None), delta


def _targets(net: DenseNet, target, n: int) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.ndim <= 1:
        t = t.reshape(n, -1) if n > 1 else t.reshape(1, -1)
    if t.shape != (n, net.spec.n_out):
        raise ShapeError(f"target shape {t.shape} does not match network output {net.spec.n_out}")
    return t


def loss(net: DenseNet, x, target, kind: LossKind) -> float:
    """Mean loss over the given input rows."""
    X, _ = _as_batch(net, x)
    t = _targets(net, target, len(X))
    c = forward_cache(net, X)
    return float(loss_value(net.spec.output_head, kind, c.logits, c.output, t).mean())


def parameter_gradients(net: DenseNet, x, target, kind: LossKind):
    """Gradients of the (batch-mean) loss with respect to every weight and bias."""
    X, _ = _as_batch(net, x)
    t = _targets(net, target, len(X))
    c = forward_cache(net, X)
    g = logit_grad(net.spec.output_head, kind, c.logits, c.output, t)
    dw, db, _ = backward(net, c, g)
    n = len(X)
    return [w / n for w in dw], [b / n for b in db]


def input_gradient(net: DenseNet, x, target, kind: LossKind) -> np.ndarray:
    """Exact dLoss/dinput. Batched input gives one gradient row per sample."""
    X, single = _as_batch(net, x)
    t = _targets(net, target, len(X))
    c = forward_cache(net, X)
    g = logit_grad(net.spec.output_head, kind, c.logits, c.output, t)
    _, _, dx = backward(net, c, g, need_params=False)
    return dx[0] if single else dx


# ---------------------------------------------------------------------------
# training

def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


class ParamUpdater:
    """Applies SGD or Adam updates to a fixed list of parameter arrays in place.

    Adam uses the usual defaults (beta1=0.9, beta2=0.999, eps=1e-8).
    """

    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.kind = cfg.optimizer
        self.t = 0
        if self.kind is Optimizer.ADAM:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
            self.tmp = [np.empty_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        """``grads`` are batch-mean gradients aligned with ``params``."""
        if self.kind is Optimizer.SGD:
            for p, g in zip(self.params, grads):
                p -= self.lr * g
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc2 = np.sqrt(1.0 - b2 ** self.t)
        lr_t = self.lr * bc2 / (1.0 - b1 ** self.t)
        eps_t = self.eps * bc2
        # in place: these arrays are the size of the whole network
        for p, g, m, v, tmp in zip(self.params, grads, self.m, self.v, self.tmp):
            m *= b1
            np.multiply(g, 1.0 - b1, out=tmp)
            m += tmp
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += eps_t
            np.divide(m, tmp, out=tmp)
            tmp *= lr_t
            p -= tmp


def param_list(net: DenseNet) -> list[np.ndarray]:
    return [*net.weights, *net.biases]


def train(net: DenseNet, inputs, targets, kind: LossKind, cfg: TrainConfig,
          history: list[float] | None = None) -> DenseNet:
    """Mini-batch training. Returns a new network; ``net`` is left untouched.

    If ``history`` is given, the mean training loss of each epoch (measured
    during the pass) is appended to it.
    """
    kind = LossKind(kind)
    _check_loss(net.spec.output_head, kind)
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training data must be a nonempty 2-D array")
    if X.shape[1] != net.spec.n_in:
        raise ShapeError(f"input width {X.shape[1]} does not match network input {net.spec.n_in}")
    T = _targets(net, targets, len(X))
    rng = np.random.default_rng(cfg.seed)
    out = net.copy()
    updater = ParamUpdater(param_list(out), cfg)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batch_order(len(X), cfg.batch_size, rng):
            c = forward_cache(out, X[idx])
            per = loss_value(out.spec.output_head, kind, c.logits, c.output, T[idx])
            total += float(per.sum())
            if not np.isfinite(total):
                raise DivergenceError(epoch)
            g = logit_grad(out.spec.output_head, kind, c.logits, c.output, T[idx])
            dw, db, _ = backward(out, c, g)
            n = len(idx)
            grads = [*dw, *db]
            for d in grads:
                d /= n
            updater.step(grads)
        if not all(np.all(np.isfinite(w)) for w in out.weights):
            raise DivergenceError(epoch)
        if history is not None:
            history.append(total / len(X))
    return out


# ---------------------------------------------------------------------------
# checkpoint text format

def _fmt(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values.ravel())


def dumps(net: DenseNet, annotations: Sequence[str] = ()) -> str:
    """Serialize to the ``densenet v1`` text format."""
    buf = io.StringIO()
    buf.write("densenet v1\n")
    for a in annotations:
        buf.write(f"# {a}\n")
    s = net.spec
    buf.write(f"spec {','.join(map(str, s.layer_sizes))} {s.hidden_activation.value} {s.output_head.value}\n")
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        buf.write(f"layer {i} weights {w.shape[0]}x{w.shape[1]}\n")
        for row in w:
            buf.write(_fmt(row) + "\n")
        buf.write(f"layer {i} bias {b.shape[0]}\n")
        buf.write(_fmt(b) + "\n")
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def loads(text: str) -> tuple[DenseNet, list[str]]:
    """Parse the ``densenet v1`` format. Returns the net and its annotations."""
    lines = text.splitlines()
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise CheckpointError("unexpected end of checkpoint")
        line = lines[pos]
        pos += 1
        return line

    if take().strip() != "densenet v1":
        raise CheckpointError("missing 'densenet v1' header")
    notes = []
    line = take()
    while line.startswith("# "):
        notes.append(line[2:])
        line = take()
    parts = line.split()
    if len(parts) != 4 or parts[0] != "spec":
        raise CheckpointError(f"bad spec line: {line!r}")
    spec = DenseNetSpec(tuple(int(v) for v in parts[1].split(",")), Activation(parts[2]), Head(parts[3]))
    weights, biases = [], []
    for i in range(len(spec.layer_sizes) - 1):
        header = take().split()
        rows, cols = (int(v) for v in header[3].split("x"))
        w = np.array([[float(v) for v in take().split()] for _ in range(rows)], dtype=np.float64).reshape(rows, cols)
        take()
        b = np.array([float(v) for v in take().split()], dtype=np.float64)
        weights.append(w)
        biases.append(b)
    return DenseNet(spec, weights, biases), notes


def fingerprint(net: DenseNet) -> str:
    """SHA-256 of the canonical checkpoint text (annotations excluded)."""
    return hashlib.sha256(dumps(net).encode()).hexdigest()
