"""Small feed-forward networks with hand-written backprop.

Every layer is an affine map in homogeneous coordinates followed by a
pointwise nonlinearity::

    a_l = [h_{l-1}, 1]          (batch x (d_in + 1))
    s_l = a_l @ W_l.T           (batch x d_out)
    h_l = phi_l(s_l)

The last layer has no nonlinearity and produces the logits ``z``. The
forward pass records ``a_l`` and ``s_l`` for every layer; the backward pass
records the per-example derivatives of the objective with respect to
``s_l``. Those are exactly the quantities the Kronecker-factored curvature
estimators consume.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from kfade.data import Dataset
from kfade.linalg import make_rng

logger = logging.getLogger(__name__)

NONLINEARITIES = ("relu", "tanh", "none")


class ModelError(ValueError):
    """Shape or configuration problems with a network or checkpoint."""


class NumericError(ArithmeticError):
    """Non-finite values or a diverging optimisation."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    d_in: int
    d_out: int
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.d_in <= 0 or self.d_out <= 0:
            raise ModelError(f"layer {self.name!r}: extents must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ModelError(
                f"layer {self.name!r}: nonlinearity must be one of {NONLINEARITIES}"
            )

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in + 1)


@dataclass(frozen=True)
class Network:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ModelError("network needs at least one layer")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ModelError(f"layer names must be unique: {names}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ModelError(
                    f"layer {nxt.name!r} expects d_in={nxt.d_in}, "
                    f"but {prev.name!r} produces {prev.d_out}"
                )
        if layers[-1].nonlinearity != "none":
            raise ModelError("the final layer must use nonlinearity 'none' (logits)")

    @classmethod
    def mlp(cls, sizes: Sequence[int], nonlinearity: str = "tanh", prefix: str = "fc"):
        """Build ``fc0, fc1, ...`` layers between consecutive ``sizes``."""
        n = len(sizes) - 1
        return cls(
            tuple(
                LayerSpec(
                    f"{prefix}{i}",
                    sizes[i],
                    sizes[i + 1],
                    nonlinearity if i < n - 1 else "none",
                )
                for i in range(n)
            )
        )

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].d_out

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ModelError(f"no layer named {name!r}")

    def n_params(self, names: Iterable[str] | None = None) -> int:
        names = self.names if names is None else list(names)
        return sum(int(np.prod(self.layer(n).weight_shape)) for n in names)

    def init(self, seed: int, scale: float = 1.0) -> "Checkpoint":
        """Glorot-style normal initialisation with zero biases."""
        rng = make_rng(seed, 0)
        weights = {}
        for layer in self.layers:
            std = scale * np.sqrt(2.0 / (layer.d_in + layer.d_out))
            w = np.zeros(layer.weight_shape)
            w[:, :-1] = rng.normal(0.0, std, size=(layer.d_out, layer.d_in))
            weights[layer.name] = w
        return Checkpoint(weights, {"seed": seed, "steps": 0, "provenance": "init"})

    def to_dict(self) -> list[dict]:
        return [
            {"name": l.name, "d_in": l.d_in, "d_out": l.d_out, "nonlinearity": l.nonlinearity}
            for l in self.layers
        ]


class Checkpoint:
    """Immutable mapping from layer name to a ``d_out x (d_in + 1)`` weight matrix.

    The arrays are made read-only on construction; all updates go through
    :meth:`replace`, which returns a new checkpoint.
    """

    def __init__(self, weights: Mapping[str, np.ndarray], meta: Mapping | None = None):
        frozen = {}
        for name, w in weights.items():
            arr = np.array(w, dtype=np.float64, order="C", copy=True)
            if arr.ndim != 2:
                raise ModelError(f"weight {name!r} must be a matrix, got rank {arr.ndim}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"weight {name!r} has non-finite entries")
            arr.flags.writeable = False
            frozen[name] = arr
        self._weights = frozen
        self.meta = dict(meta or {})
        self._digest: str | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self._weights[name]

    def __contains__(self, name: str) -> bool:
        return name in self._weights

    def __iter__(self):
        return iter(self._weights)

    def items(self):
        return self._weights.items()

    @property
    def names(self) -> list[str]:
        return list(self._weights)

    def replace(self, updates: Mapping[str, np.ndarray], **meta) -> "Checkpoint":
        weights = dict(self._weights)
        for name, w in updates.items():
            if name not in weights:
                raise ModelError(f"unknown layer {name!r}")
            if np.shape(w) != weights[name].shape:
                raise ModelError(
                    f"layer {name!r}: shape {np.shape(w)} != {weights[name].shape}"
                )
            weights[name] = w
        return Checkpoint(weights, {**self.meta, **meta})

    def digest(self) -> str:
        """SHA-256 over layer names, shapes and raw little-endian payloads."""
        if self._digest is None:
            h = hashlib.sha256()
            for name in sorted(self._weights):
                w = self._weights[name]
                h.update(name.encode())
                h.update(np.asarray(w.shape, dtype="<u8").tobytes())
                h.update(w.astype("<f8").tobytes())
            self._digest = h.hexdigest()
        return self._digest

    def check_against(self, net: Network) -> None:
        for layer in net.layers:
            if layer.name not in self._weights:
                raise ModelError(f"checkpoint is missing layer {layer.name!r}")
            if self._weights[layer.name].shape != layer.weight_shape:
                raise ModelError(
                    f"layer {layer.name!r}: checkpoint shape "
                    f"{self._weights[layer.name].shape} != {layer.weight_shape}"
                )

    def equal(self, other: "Checkpoint") -> bool:
        return self.names == other.names and all(
            np.array_equal(self[n], other[n]) for n in self.names
        )

    def __repr__(self):
        shapes = {n: w.shape for n, w in self._weights.items()}
        return f"Checkpoint({shapes}, digest={self.digest()[:12]})"


@dataclass
class BatchCapture:
    """Per-layer quantities recorded during one forward/backward pass.

    ``activations[name]`` holds the homogeneous layer inputs ``a``,
    ``preacts[name]`` the affine outputs ``s`` and, after
    :func:`backward`, ``ds[name]`` holds the per-example derivative of the
    objective with respect to ``s`` (not divided by the batch size).
    """

    activations: dict[str, np.ndarray]
    preacts: dict[str, np.ndarray]
    logits: np.ndarray
    checkpoint_digest: str
    ds: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def _activate(s: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(s)
    if kind == "relu":
        return np.maximum(s, 0.0)
    return s


def _activate_grad(s: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(s)
        return 1.0 - t * t
    if kind == "relu":
        return (s > 0).astype(np.float64)
    return np.ones_like(s)


def forward(net: Network, ckpt: Checkpoint, x: np.ndarray) -> tuple[np.ndarray, BatchCapture]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.d_in:
        raise ModelError(f"expected inputs of shape (batch, {net.d_in}), got {x.shape}")
    activations, preacts = {}, {}
    h = x
    for layer in net.layers:
        w = ckpt[layer.name]
        a = np.empty((h.shape[0], layer.d_in + 1))
        a[:, :-1] = h
        a[:, -1] = 1.0
        s = a @ w.T
        if not np.all(np.isfinite(s)):
            raise NumericError(f"non-finite pre-activations in layer {layer.name!r}")
        activations[layer.name] = a
        preacts[layer.name] = s
        h = _activate(s, layer.nonlinearity)
    return h, BatchCapture(activations, preacts, h, ckpt.digest())


def logits(net: Network, ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    return forward(net, ckpt, x)[0]


def backward(
    net: Network,
    ckpt: Checkpoint,
    capture: BatchCapture,
    logit_grads: np.ndarray,
    layers: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate per-example logit gradients.

    Returns the gradient of ``mean_i objective_i`` with respect to each weight
    matrix (restricted to ``layers`` when given) and stores the raw
    per-example ``d objective_i / d s`` rows in ``capture.ds``.
    """
    if capture.checkpoint_digest != ckpt.digest():
        raise ModelError("capture was produced by a different checkpoint (stale)")
    dz = np.asarray(logit_grads, dtype=np.float64)
    if dz.shape != capture.logits.shape:
        raise ModelError(f"logit grads shape {dz.shape} != logits {capture.logits.shape}")
    wanted = set(net.names if layers is None else layers)
    n = dz.shape[0]
    grads = {}
    ds = dz
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        capture.ds[layer.name] = ds
        if layer.name in wanted:
            grads[layer.name] = ds.T @ capture.activations[layer.name] / n
        if i == 0:
            break
        prev = net.layers[i - 1]
        dh = ds @ ckpt[layer.name][:, :-1]
        ds = dh * _activate_grad(capture.preacts[prev.name], prev.nonlinearity)
    return {name: grads[name] for name in net.names if name in grads}


# ---------------------------------------------------------------------------
# losses (vectorised over a batch: z is (n, C), y is (n,))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _check_labels(z: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if y.shape[0] != z.shape[0]:
        raise ModelError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ModelError("class labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ModelError(f"class index out of range for {z.shape[1]} classes")
    return z, y


def cross_entropy(z, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-example ``-z_y + logsumexp(z)`` and its gradient ``softmax(z) - e_y``."""
    z, y = _check_labels(z, y)
    rows = np.arange(z.shape[0])
    loss = -log_softmax(z)[rows, y]
    grad = softmax(z)
    grad[rows, y] -= 1.0
    return loss, grad


def margin_loss(z, y) -> tuple[np.ndarray, np.ndarray]:
    """Negative per-example margin ``-z_y + logsumexp_{i != y} z_i``.

    Unlike cross entropy this keeps growing as the model becomes confident,
    since the target logit is left out of the normaliser.
    """
    z, y = _check_labels(z, y)
    if z.shape[1] < 2:
        raise ModelError("margin loss needs at least two classes")
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, y] = -np.inf
    m = others.max(axis=1, keepdims=True)
    e = np.exp(others - m)
    total = e.sum(axis=1, keepdims=True)
    loss = -z[rows, y] + (m + np.log(total))[:, 0]
    grad = e / total
    grad[rows, y] = -1.0
    return loss, grad


LOSSES = {"cross_entropy": cross_entropy, "margin": margin_loss}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ModelError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None


def sample_pseudo_labels(z, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``y_hat ~ softmax(z)`` per row; return it with ``e_{y_hat} - softmax(z)``.

    The second output is the derivative of ``log p(y_hat | z)`` with respect
    to the logits, i.e. the pseudo-gradient used by Fisher estimators.
    """
    p = softmax(np.atleast_2d(z))
    u = rng.random(p.shape[0])
    cdf = np.cumsum(p, axis=1)
    y_hat = np.minimum((cdf < u[:, None]).sum(axis=1), p.shape[1] - 1)
    g = -p
    g[np.arange(p.shape[0]), y_hat] += 1.0
    return y_hat, g


# ---------------------------------------------------------------------------
# evaluation and training


def mean_loss(net: Network, ckpt: Checkpoint, data: Dataset, loss: str = "cross_entropy") -> float:
    z = logits(net, ckpt, data.inputs)
    return float(get_loss(loss)(z, data.labels)[0].mean())


def accuracy(net: Network, ckpt: Checkpoint, data: Dataset) -> float:
    z = logits(net, ckpt, data.inputs)
    return float(np.mean(np.argmax(z, axis=1) == data.labels))


def loss_and_grads(
    net: Network,
    ckpt: Checkpoint,
    x: np.ndarray,
    y: np.ndarray,
    loss: str = "cross_entropy",
    layers: Iterable[str] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its gradient for each (selected) layer."""
    z, cap = forward(net, ckpt, x)
    values, dz = get_loss(loss)(z, y)
    return float(values.mean()), backward(net, ckpt, cap, dz, layers)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.1
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0


def train_sgd(
    net: Network,
    data: Dataset,
    config: TrainConfig,
    init: Checkpoint | None = None,
    layers: Iterable[str] | None = None,
) -> Checkpoint:
    """Plain mini-batch SGD on mean cross entropy.

    The initialisation (when ``init`` is None) and the per-epoch shuffles
    are drawn from independent streams of ``config.seed``, so two runs with
    the same seed and data are bit-identical.
    """
    if len(data) == 0:
        raise ModelError("cannot train on an empty dataset")
    ckpt = init if init is not None else net.init(config.seed)
    ckpt.check_against(net)
    trainable = list(net.names if layers is None else layers)
    weights = {name: np.array(ckpt[name]) for name in net.names}
    shuffle_rng = make_rng(config.seed, 1)
    n = len(data)
    steps = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            current = Checkpoint(weights)
            _, grads = loss_and_grads(
                net, current, data.inputs[idx], data.labels[idx], layers=trainable
            )
            for name in trainable:
                g = grads[name]
                if config.weight_decay:
                    g = g + config.weight_decay * weights[name]
                weights[name] = weights[name] - config.lr * g
            steps += 1
        epoch_loss = mean_loss(net, Checkpoint(weights), data)
        if not np.isfinite(epoch_loss):
            raise NumericError(
                f"training diverged at epoch {epoch} (step {steps}, lr={config.lr})"
            )
        logger.debug("epoch %d loss %.6f", epoch, epoch_loss)
    final = Checkpoint(weights)
    return final.replace(
        {},
        seed=config.seed,
        steps=int(ckpt.meta.get("steps", 0)) + steps,
        provenance=f"train_sgd(epochs={config.epochs}, lr={config.lr}, batch={config.batch})",
        train_loss=mean_loss(net, final, data),
    )
