"""Factored feed-forward networks with semi-orthogonal bottleneck factors.

Each layer stores its weight as a low-rank product W = A @ B where B is kept
approximately semi-orthogonal (B B^T ~ I). Temporal context is realized by
frame splicing: a layer with context offsets concatenates its input rows at
those offsets (clamped at sequence edges) before the affine map, which is the
same math as a strided 1-D convolution at this scale but far easier to test.

Gradients are hand-derived per layer; there is no autodiff tape.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, DataError, ShapeError, TrainingDivergedError
from .numeric import Array, as_tensor, check_finite
from .rng import Rng

ACTIVATIONS = ("identity", "relu", "sigmoid")


def _activate(name: str, z: Array) -> Array:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        # Stable piecewise form; never overflows.
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str, z: Array, h: Array) -> Array:
    """d(activation)/dz given pre-activation z and output h."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "sigmoid":
        return h * (1.0 - h)
    raise ValueError(f"unknown activation {name!r}")


def splice(x: Array, offsets: tuple[int, ...]) -> Array:
    """Concatenate rows of x at the given time offsets, clamping at the edges.

    (T, d) -> (T, d * len(offsets)). Empty offsets return x unchanged.
    """
    if not offsets:
        return x
    t = x.shape[0]
    idx = np.clip(np.arange(t)[:, None] + np.asarray(offsets)[None, :], 0, t - 1)
    return x[idx].reshape(t, -1)


def unsplice(grad_spliced: Array, offsets: tuple[int, ...], t: int, d: int) -> Array:
    """Adjoint of splice: scatter-add spliced-input gradients back to frames."""
    if not offsets:
        return grad_spliced
    idx = np.clip(np.arange(t)[:, None] + np.asarray(offsets)[None, :], 0, t - 1)
    out = np.zeros((t, d))
    np.add.at(out, idx.ravel(), grad_spliced.reshape(t, len(offsets), d).reshape(-1, d))
    return out


@dataclass
class FactoredLayer:
    """One factored affine layer: h = act((x_spliced @ B^T) @ A^T).

    a: (out_dim, r) factor, b: (r, in_dim) factor with the semi-orthogonal
    constraint; in_dim already includes the splicing multiplier.
    """

    a: Array
    b: Array
    activation: str = "identity"
    context_offsets: tuple[int, ...] = ()

    def __post_init__(self):
        self.a = as_tensor(self.a)
        self.b = as_tensor(self.b)
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("layer factors must be 2-D")
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"factor shapes disagree: A {self.a.shape}, B {self.b.shape}")
        if self.bottleneck > min(self.out_dim, self.in_dim):
            raise ShapeError(
                f"bottleneck {self.bottleneck} exceeds min({self.out_dim}, {self.in_dim})"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.context_offsets = tuple(int(o) for o in self.context_offsets)

    @property
    def out_dim(self) -> int:
        return self.a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.b.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.a.shape[1]

    @property
    def base_in_dim(self) -> int:
        """Input width before splicing."""
        k = max(1, len(self.context_offsets))
        return self.in_dim // k

    def param_count(self) -> int:
        return self.a.size + self.b.size

    def weight(self) -> Array:
        """Effective dense weight W = A @ B."""
        return self.a @ self.b

    def semi_orth_residual(self) -> float:
        r = self.b @ self.b.T - np.eye(self.bottleneck)
        return float(np.linalg.norm(r))

    @staticmethod
    def create(
        out_dim: int,
        in_dim: int,
        r: int,
        rng: Rng,
        activation: str = "identity",
        context_offsets: tuple[int, ...] = (),
    ) -> "FactoredLayer":
        """Scaled-uniform init on both factors, then one constraint step."""
        k = max(1, len(context_offsets))
        full_in = in_dim * k
        lim_a = np.sqrt(6.0 / (r + out_dim))
        lim_b = np.sqrt(6.0 / (full_in + r))
        layer = FactoredLayer(
            a=rng.uniform(size=(out_dim, r), low=-lim_a, high=lim_a),
            b=rng.uniform(size=(r, full_in), low=-lim_b, high=lim_b),
            activation=activation,
            context_offsets=tuple(context_offsets),
        )
        semi_orth_step(layer)
        return layer


def semi_orth_step(layer: FactoredLayer) -> FactoredLayer:
    """One in-place constraint step B <- B - 1/4 (B B^T - I) B.

    The residual ||B B^T - I||_F decreases strictly unless already <= 1e-6.
    Raises ConditioningError when B is numerically rank-deficient.
    """
    b = layer.b
    gram = b @ b.T
    if np.linalg.cond(gram) > 1e12:
        raise ConditioningError("factor B is rank-deficient; cannot enforce constraint")
    layer.b = b - 0.25 * (gram - np.eye(layer.bottleneck)) @ b
    return layer


@dataclass
class Network:
    """Ordered stack of factored layers; the last layer's output is the logits."""

    layers: list[FactoredLayer]
    output_dim: int = 0

    def __post_init__(self):
        if self.layers and self.output_dim == 0:
            self.output_dim = self.layers[-1].out_dim
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.base_in_dim != prev.out_dim:
                raise ShapeError(
                    f"layer dims incompatible: {prev.out_dim} -> expected input "
                    f"{nxt.base_in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].base_in_dim

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    @staticmethod
    def create(
        dims: list[int],
        bottlenecks: list[int],
        rng: Rng,
        activation: str = "relu",
        context_offsets: list[tuple[int, ...]] | None = None,
    ) -> "Network":
        """Build a network with dims[0] inputs, dims[-1] outputs.

        Hidden layers use `activation`; the final layer is identity (logits).
        """
        n_layers = len(dims) - 1
        if len(bottlenecks) != n_layers:
            raise ShapeError("need one bottleneck per layer")
        offsets = context_offsets or [()] * n_layers
        layers = []
        for i in range(n_layers):
            act = activation if i < n_layers - 1 else "identity"
            layers.append(
                FactoredLayer.create(
                    dims[i + 1], dims[i], bottlenecks[i], rng.split(i),
                    activation=act, context_offsets=tuple(offsets[i]),
                )
            )
        return Network(layers)


def forward(net: Network, x: Array) -> list[Array]:
    """Run the network, returning every layer's activation h^1..h^L.

    The final entry is the logits. Input is (T, input_dim).
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim {net.input_dim}")
    activations = []
    h = x
    for layer in net.layers:
        xs = splice(h, layer.context_offsets)
        z = (xs @ layer.b.T) @ layer.a.T
        h = _activate(layer.activation, z)
        activations.append(h)
    check_finite(h, "network output")
    return activations


def _softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(net: Network, labels: Array) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= net.output_dim):
        raise DataError(f"label out of range [0, {net.output_dim})")
    return labels.astype(np.int64)


def cross_entropy(net: Network, x: Array, labels: Array) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = _check_labels(net, labels)
    logits = forward(net, x)[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(labels.size), labels].mean())


def accuracy(net: Network, x: Array, labels: Array) -> float:
    labels = _check_labels(net, labels)
    logits = forward(net, x)[-1]
    return float((logits.argmax(axis=1) == labels).mean())


def backward(net: Network, x: Array, labels: Array) -> tuple[list[tuple[Array, Array]], float]:
    """Analytic gradients of the mean cross-entropy wrt every (A, B) factor.

    Returns ([(dA, dB) per layer], loss). Batch reduction is the mean, so
    duplicating every row of a batch leaves the gradient unchanged.
    """
    x = as_tensor(x)
    labels = _check_labels(net, labels)
    t = x.shape[0]
    if t == 0:
        raise DataError("empty batch")

    spliced, pre, acts = [], [], []
    h = x
    for layer in net.layers:
        xs = splice(h, layer.context_offsets)
        p = xs @ layer.b.T
        z = p @ layer.a.T
        h = _activate(layer.activation, z)
        spliced.append((xs, p))
        pre.append(z)
        acts.append(h)

    logits = acts[-1]
    probs = _softmax(logits)
    zmax = logits - logits.max(axis=1, keepdims=True)
    logp = zmax - np.log(np.exp(zmax).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(t), labels].mean())
    if not np.isfinite(loss):
        raise TrainingDivergedError("loss is non-finite")

    dh = probs.copy()
    dh[np.arange(t), labels] -= 1.0
    dh /= t

    grads: list[tuple[Array, Array]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        xs, p = spliced[i]
        dz = dh * _activate_grad(layer.activation, pre[i], acts[i])
        da = dz.T @ p
        dp = dz @ layer.a
        db = dp.T @ xs
        grads[i] = (da, db)
        if i > 0:
            dxs = dp @ layer.b
            dh = unsplice(dxs, layer.context_offsets, t, layer.base_in_dim)
    return grads, loss


@dataclass
class TrainConfig:
    """Plain SGD hyperparameters."""

    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    semi_orth_interval: int = 4

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning rate must be >= 0; batch size and epochs positive")
        if self.semi_orth_interval <= 0:
            raise ValueError("semi_orth_interval must be positive")


@dataclass
class TrainResult:
    net: Network
    loss_curve: list[float] = field(default_factory=list)


def train(net: Network, x: Array, labels: Array, cfg: TrainConfig) -> TrainResult:
    """SGD with periodic semi-orthogonal constraint steps.

    Mutates and returns `net`. Deterministic given cfg.seed. The constraint
    is applied only after parameters actually changed, so a zero learning
    rate leaves the model bit-for-bit untouched.
    """
    x = as_tensor(x)
    labels = _check_labels(net, labels)
    n = x.shape[0]
    if n == 0:
        raise DataError("empty dataset")
    rng = Rng(cfg.seed)
    curve = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads, loss = backward(net, x[idx], labels[idx])
            epoch_losses.append(loss)
            if cfg.learning_rate > 0.0:
                for layer, (da, db) in zip(net.layers, grads):
                    layer.a -= cfg.learning_rate * da
                    layer.b -= cfg.learning_rate * db
                step += 1
                if step % cfg.semi_orth_interval == 0:
                    for layer in net.layers:
                        semi_orth_step(layer)
        curve.append(float(np.mean(epoch_losses)))
        if not np.isfinite(curve[-1]):
            raise TrainingDivergedError(f"training diverged at epoch {len(curve)}")
    return TrainResult(net=net, loss_curve=curve)
