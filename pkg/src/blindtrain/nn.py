"""Small fully-connected classifier with a pluggable matrix-product backend.

Samples are columns: a batch of p inputs of dimension n is an (n x p)
matrix, a linear layer holds W (m x n) and bias b (m,), and the forward
product is W @ X.  Every heavy product goes through a MatMulExecutor so
the same training loop runs against plain local numpy or against the
blinded remote offload; the two must agree to float tolerance.

The backward pass consumes the pair of products the executor returns
for each linear layer:

    T1 = X @ delta.T    (so the weight gradient is T1.T / batch)
    T2 = delta.T @ W    (so the upstream delta is T2.T, gated by the
                         activation derivative)

and applies all weight updates only after every product verified, so an
aborted step leaves the network untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, make_rng

__all__ = [
    "Linear",
    "ReLU",
    "Softmax",
    "Network",
    "ForwardCache",
    "TrainConfig",
    "MatMulExecutor",
    "LocalExecutor",
    "softmax_cols",
    "cross_entropy_softmax",
    "forward",
    "backward",
    "train",
    "predict",
    "accuracy",
]


class MatMulExecutor:
    """Seam for the two products of each linear layer.

    multiply_backward may reuse operands retained from the matching
    multiply_forward call of the same batch; callers guarantee the
    forward/backward pairing per layer.
    """

    def start_epoch(self, epoch: int) -> None:
        pass

    def multiply_forward(self, layer_id: int, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def multiply_backward(
        self, layer_id: int, delta: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class LocalExecutor(MatMulExecutor):
    """In-process reference backend: plain numpy products."""

    def __init__(self):
        self._held: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def multiply_forward(self, layer_id, w, x):
        if w.shape[1] != x.shape[0]:
            raise ShapeError(f"forward product: {w.shape} x {x.shape}")
        self._held[layer_id] = (w, x)
        return w @ x

    def multiply_backward(self, layer_id, delta):
        w, x = self._held.pop(layer_id)
        if delta.shape != (w.shape[0], x.shape[1]):
            raise ShapeError(
                f"backward delta {delta.shape} does not match product shape "
                f"({w.shape[0]}, {x.shape[1]})"
            )
        return x @ delta.T, delta.T @ w


class Linear:
    """Affine layer W @ x + b.  policy picks how it is partitioned when
    offloaded: split by output rows ("tensor"), by batch columns
    ("data"), or kept on the coordinator ("master")."""

    POLICIES = ("tensor", "data", "master")

    def __init__(self, out_dim: int, in_dim: int, policy: str = "tensor"):
        if out_dim < 1 or in_dim < 1:
            raise ShapeError(f"linear dims must be positive, got ({out_dim}, {in_dim})")
        if policy not in self.POLICIES:
            raise ValueError(f"unknown policy {policy!r}, expected one of {self.POLICIES}")
        self.out_dim = out_dim
        self.in_dim = in_dim
        self.policy = policy
        self.layer_id: int = -1  # assigned by Network
        self.W: np.ndarray | None = None
        self.b: np.ndarray | None = None


class ReLU:
    pass


class Softmax:
    pass


class Network:
    """Ordered layer list; the last layer must be Softmax and adjacent
    linear dims must chain."""

    def __init__(self, layers: list):
        if not layers or not isinstance(layers[-1], Softmax):
            raise ValueError("network must end with a Softmax layer")
        linears = [l for l in layers if isinstance(l, Linear)]
        if not linears:
            raise ValueError("network needs at least one linear layer")
        for prev, cur in zip(linears, linears[1:]):
            if cur.in_dim != prev.out_dim:
                raise ShapeError(
                    f"layer dims do not chain: ({prev.out_dim}, {prev.in_dim}) "
                    f"then ({cur.out_dim}, {cur.in_dim})"
                )
        for i, lin in enumerate(linears):
            lin.layer_id = i
        self.layers = list(layers)
        self.linears = linears

    @classmethod
    def from_dims(cls, dims: list[int], policies: list[str] | None = None) -> "Network":
        """[2, 16, 16, 2] -> Linear/ReLU chain ending in Softmax."""
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        n_linear = len(dims) - 1
        if policies is None:
            policies = ["tensor"] * n_linear
        if len(policies) != n_linear:
            raise ValueError(f"{n_linear} linear layers need {n_linear} policies, got {len(policies)}")
        layers: list = []
        for i in range(n_linear):
            layers.append(Linear(dims[i + 1], dims[i], policies[i]))
            if i < n_linear - 1:
                layers.append(ReLU())
        layers.append(Softmax())
        return cls(layers)

    def init_weights(self, seed: int) -> None:
        """Uniform in [-sqrt(1/n), sqrt(1/n)] per layer, biases zero."""
        rng = make_rng(seed)
        for lin in self.linears:
            bound = math.sqrt(1.0 / lin.in_dim)
            lin.W = rng.uniform(-bound, bound, size=(lin.out_dim, lin.in_dim))
            lin.b = np.zeros(lin.out_dim)

    def activation_after(self, linear_index: int):
        """The nonlinearity between this linear layer and the next, if any."""
        seen = -1
        for layer in self.layers:
            if isinstance(layer, Linear):
                seen += 1
            elif seen == linear_index and isinstance(layer, ReLU):
                return layer
        return None

    @property
    def in_dim(self) -> int:
        return self.linears[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.linears[-1].out_dim


@dataclass
class ForwardCache:
    """Per-layer operands retained for one backward pass."""

    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    preacts: dict[int, np.ndarray] = field(default_factory=dict)
    batch_width: int = 0


def softmax_cols(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def cross_entropy_softmax(z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(z) against integer labels, plus the
    fused delta (softmax - onehot) that seeds backprop."""
    labels = np.asarray(labels)
    n_classes, width = z.shape
    if labels.shape != (width,):
        raise ShapeError(f"labels {labels.shape} do not match batch width {width}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(width)
    loss = float(np.mean(log_norm - shifted[labels, cols]))
    delta = softmax_cols(z)
    delta[labels, cols] -= 1.0
    return loss, delta


def forward(net: Network, x: np.ndarray, executor: MatMulExecutor) -> tuple[np.ndarray, ForwardCache]:
    if x.shape[0] != net.in_dim:
        raise ShapeError(f"input {x.shape} does not match network in_dim {net.in_dim}")
    cache = ForwardCache(batch_width=x.shape[1])
    cur = x
    for layer in net.layers:
        if isinstance(layer, Linear):
            z = executor.multiply_forward(layer.layer_id, layer.W, cur)
            z = z + layer.b[:, None]
            cache.inputs[layer.layer_id] = cur
            cache.preacts[layer.layer_id] = z
            cur = z
        elif isinstance(layer, ReLU):
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, Softmax):
            cur = softmax_cols(cur)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    return cur, cache


def backward(
    net: Network,
    cache: ForwardCache,
    labels: np.ndarray,
    executor: MatMulExecutor,
    learning_rate: float,
    batch_size: int,
) -> Network:
    """One SGD step.  All products are fetched and verified before any
    weight changes, so a verification failure leaves the network as it
    was."""
    last = net.linears[-1].layer_id
    _, delta = cross_entropy_softmax(cache.preacts[last], labels)
    scale = learning_rate / batch_size
    updates = []
    for i in range(len(net.linears) - 1, -1, -1):
        lin = net.linears[i]
        t1, t2 = executor.multiply_backward(lin.layer_id, delta)
        new_w = lin.W - scale * t1.T
        new_b = lin.b - scale * delta.sum(axis=1)
        updates.append((lin, new_w, new_b))
        if i > 0:
            delta = np.ascontiguousarray(t2.T)
            prev = net.linears[i - 1]
            if isinstance(net.activation_after(i - 1), ReLU):
                delta = delta * (cache.preacts[prev.layer_id] > 0.0)
    for lin, new_w, new_b in updates:
        lin.W = new_w
        lin.b = new_b
    return net


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def train(net, dataset, cfg: TrainConfig, executor: MatMulExecutor, epoch_callback=None):
    """Mini-batch SGD over the whole dataset, epochs * ceil(n / batch)
    steps.  Batch order is shuffled per epoch from cfg.seed, so two runs
    with the same seed (whatever the executor) visit identical batches.
    """
    features, labels = dataset.features, dataset.labels
    n = features.shape[1]
    if n < cfg.batch_size:
        raise ShapeError(f"dataset has {n} samples, smaller than batch size {cfg.batch_size}")
    order_rng = make_rng(cfg.seed)
    n_batches = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        executor.start_epoch(epoch)
        order = order_rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = np.ascontiguousarray(features[:, idx])
            yb = labels[idx]
            _, fcache = forward(net, xb, executor)
            loss, _ = cross_entropy_softmax(fcache.preacts[net.linears[-1].layer_id], yb)
            losses.append(loss)
            backward(net, fcache, yb, executor, cfg.learning_rate, idx.size)
        if epoch_callback is not None:
            epoch_callback(epoch, float(np.mean(losses)))
    return net


def predict(net: Network, x: np.ndarray, executor: MatMulExecutor | None = None) -> np.ndarray:
    probs, _ = forward(net, x, executor if executor is not None else LocalExecutor())
    return np.argmax(probs, axis=0)


def accuracy(net: Network, dataset, executor: MatMulExecutor | None = None) -> float:
    return float(np.mean(predict(net, dataset.features, executor) == dataset.labels))
