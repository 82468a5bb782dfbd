"""Differentiable architecture search over factored-layer candidates.

A super-network holds a candidate list per layer; each forward mixes the
candidates' outputs with architecture weights lambda drawn from a
Gumbel-softmax over log gamma. The pipelined schedule first trains candidate
weights along uniformly sampled one-hot paths, then freezes them and
optimizes log gamma on a held-out split against a complexity-penalized loss.
The same machinery searches bottleneck dimensions and per-layer precisions
(candidates = dequantized uniform-precision models pretrained with ADMM).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import (
    FactoredLayer,
    Network,
    _activate,
    _activate_grad,
    _check_labels,
    _softmax,
    backward,
    splice,
    unsplice,
)
from .numeric import Array, as_tensor, check_finite
from .rng import Rng


def gumbel_noise(rng: Rng, size) -> Array:
    """Standard Gumbel draws G = -log(-log(U))."""
    u = np.clip(rng.uniform(size=size), np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_weights_from_noise(log_gamma: Array, noise: Array, temperature: float) -> Array:
    """Architecture weights for one layer given frozen Gumbel noise."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    log_gamma = as_tensor(log_gamma)
    noise = as_tensor(noise)
    if noise.shape != log_gamma.shape:
        raise ShapeError("noise shape must match log gamma")
    z = (log_gamma + noise) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_weights(log_gamma: Array, temperature: float, rng: Rng) -> Array:
    """Sample architecture weights; positive and summing to one."""
    log_gamma = as_tensor(log_gamma)
    return gumbel_weights_from_noise(log_gamma, gumbel_noise(rng, log_gamma.shape), temperature)


@dataclass
class SuperNet:
    """Per-layer candidate lists with architecture parameters.

    complexity[l][i] is the penalty weight of candidate i at layer l
    (parameter count for dimension search, total bits for precision search);
    labels[l][i] is the human-readable candidate tag (r or bit-width).
    """

    candidates: list[list[FactoredLayer]]
    log_gamma: list[Array]
    complexity: list[Array]
    temperature: float = 1.0
    gumbel_samples: int = 4
    penalty: float = 0.0
    labels: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates or any(len(c) < 1 for c in self.candidates):
            raise ConfigError("every layer needs at least one candidate")
        self.log_gamma = [as_tensor(g) for g in self.log_gamma]
        self.complexity = [as_tensor(c) for c in self.complexity]
        for cands, lg, cx in zip(self.candidates, self.log_gamma, self.complexity):
            if not (len(cands) == lg.size == cx.size):
                raise ShapeError("log gamma / complexity sizes must match candidate counts")
        if self.temperature <= 0 or self.gumbel_samples < 1 or self.penalty < 0:
            raise ConfigError("temperature > 0, J >= 1, penalty >= 0 required")

    @property
    def num_layers(self) -> int:
        return len(self.candidates)

    def sample_lambdas(self, rng: Rng) -> list[Array]:
        return [gumbel_weights(lg, self.temperature, rng) for lg in self.log_gamma]

    def selection(self) -> list[int]:
        return [int(np.argmax(lg)) for lg in self.log_gamma]

    def selected_network(self, selection: list[int] | None = None) -> Network:
        sel = self.selection() if selection is None else selection
        return Network([copy.deepcopy(self.candidates[l][i]) for l, i in enumerate(sel)])

    @staticmethod
    def for_dim_search(
        dims: list[int],
        candidate_rs,
        rng: Rng,
        activation: str = "relu",
        penalty: float = 0.0,
        gumbel_samples: int = 4,
    ) -> "SuperNet":
        """Independent (A_i, B_i) per candidate bottleneck at every layer.

        candidate_rs is either one flat choice set (filtered per layer to
        r <= min(in, out)) or an explicit list of per-layer choice lists.
        """
        n_layers = len(dims) - 1
        if candidate_rs and isinstance(candidate_rs[0], (list, tuple)):
            per_layer = [list(c) for c in candidate_rs]
            if len(per_layer) != n_layers:
                raise ConfigError("need one candidate list per layer")
        else:
            per_layer = [
                [r for r in candidate_rs if r <= min(dims[i], dims[i + 1])]
                for i in range(n_layers)
            ]
        candidates, complexity, labels = [], [], []
        for l_idx, choices in enumerate(per_layer):
            if not choices:
                raise ConfigError(f"no feasible bottleneck candidate at layer {l_idx}")
            act = activation if l_idx < n_layers - 1 else "identity"
            row = []
            for c_idx, r in enumerate(choices):
                if r > min(dims[l_idx], dims[l_idx + 1]):
                    raise ConfigError(f"candidate r={r} exceeds layer dims at layer {l_idx}")
                row.append(
                    FactoredLayer.create(
                        dims[l_idx + 1], dims[l_idx], r,
                        rng.split(l_idx).split(c_idx), activation=act,
                    )
                )
            candidates.append(row)
            complexity.append(np.array([layer.param_count() for layer in row], dtype=np.float64))
            labels.append(list(choices))
        log_gamma = [np.zeros(len(c)) for c in per_layer]
        return SuperNet(candidates, log_gamma, complexity,
                        penalty=penalty, gumbel_samples=gumbel_samples, labels=labels)


def supernet_forward(sn: SuperNet, x: Array, lambdas: list[Array]) -> Array:
    """Mixture forward h^l = sum_i lambda_i phi_i(W_i h^(l-1)); returns logits."""
    logits, _ = _forward_cached(sn, x, lambdas)
    return logits


def _forward_cached(sn: SuperNet, x: Array, lambdas: list[Array]):
    x = as_tensor(x)
    if len(lambdas) != sn.num_layers:
        raise ShapeError("need one lambda vector per layer")
    cache = []
    h = x
    for cands, lam in zip(sn.candidates, lambdas):
        lam = as_tensor(lam)
        if lam.size != len(cands):
            raise ShapeError("lambda size must match candidate count")
        outs = []
        mixed = None
        for w, layer in zip(lam, cands):
            if w == 0.0:
                outs.append(None)
                continue
            xs = splice(h, layer.context_offsets)
            z = (xs @ layer.b.T) @ layer.a.T
            a = _activate(layer.activation, z)
            outs.append((z, a))
            mixed = w * a if mixed is None else mixed + w * a
        cache.append((h, outs, lam))
        h = mixed
    check_finite(h, "super-network output")
    return h, cache


def penalized_loss(base_loss: float, lambdas: list[Array], complexity: list[Array],
                   eta: float) -> float:
    """base + eta * sum over layers and candidates of lambda_i * C_i."""
    if eta < 0:
        raise ConfigError("penalty factor must be non-negative")
    pen = sum(float(np.dot(lam, c)) for lam, c in zip(lambdas, complexity))
    return float(base_loss) + eta * pen


def _lambda_grads(sn: SuperNet, x: Array, labels: Array, lambdas: list[Array]):
    """d(mean cross-entropy)/d lambda per layer, plus the base loss."""
    labels = np.asarray(labels, dtype=np.int64)
    t = x.shape[0]
    logits, cache = _forward_cached(sn, x, lambdas)
    probs = _softmax(logits)
    zmax = logits - logits.max(axis=1, keepdims=True)
    logp = zmax - np.log(np.exp(zmax).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(t), labels].mean())

    dh = probs.copy()
    dh[np.arange(t), labels] -= 1.0
    dh /= t

    grads = []
    for l_idx in range(sn.num_layers - 1, -1, -1):
        h_prev, outs, lam = cache[l_idx]
        g_lam = np.zeros(lam.size)
        dh_prev = np.zeros_like(h_prev) if l_idx > 0 else None
        for c_idx, (layer, out) in enumerate(zip(sn.candidates[l_idx], outs)):
            if out is None:
                continue
            z, a = out
            g_lam[c_idx] = float(np.sum(dh * a))
            if l_idx > 0:
                dz = (dh * lam[c_idx]) * _activate_grad(layer.activation, z, a)
                dxs = (dz @ layer.a) @ layer.b
                dh_prev += unsplice(dxs, layer.context_offsets, h_prev.shape[0],
                                    layer.base_in_dim)
        grads.append(g_lam)
        if l_idx > 0:
            dh = dh_prev
    grads.reverse()
    return grads, loss


def gamma_gradient_sample(
    sn: SuperNet, x: Array, labels: Array, lambdas: list[Array]
) -> tuple[list[Array], float]:
    """Gradient of the penalized loss wrt log gamma for one frozen sample.

    Chains d loss/d lambda through the softmax Jacobian of the
    Gumbel reparameterization: dL/dlog gamma_k =
    lambda_k (g_k - sum_i lambda_i g_i) / T with g = dL/dlambda + eta*C.
    """
    lam_grads, base = _lambda_grads(sn, x, labels, lambdas)
    out = []
    for lam, g_lam, c in zip(lambdas, lam_grads, sn.complexity):
        g = g_lam + sn.penalty * c
        inner = float(np.dot(lam, g))
        out.append(lam * (g - inner) / sn.temperature)
    return out, penalized_loss(base, lambdas, sn.complexity, sn.penalty)


def gamma_gradients(sn: SuperNet, x: Array, labels: Array, rng: Rng):
    """Average the per-sample gradient over J Gumbel draws."""
    total = [np.zeros_like(lg) for lg in sn.log_gamma]
    loss_sum = 0.0
    for _ in range(sn.gumbel_samples):
        lambdas = sn.sample_lambdas(rng)
        grads, loss = gamma_gradient_sample(sn, x, labels, lambdas)
        for acc, g in zip(total, grads):
            acc += g
        loss_sum += loss
    j = sn.gumbel_samples
    return [g / j for g in total], loss_sum / j


@dataclass
class SearchSchedule:
    """Two-stage schedule: stage 1 trains weights, stage 2 trains gamma."""

    stage1_epochs: int = 30
    stage2_epochs: int = 20
    held_out_fraction: float = 0.05
    temp_start: float = 5.0
    temp_end: float = 0.1
    seed: int = 0
    lr_weights: float = 0.1
    lr_gamma: float = 0.5
    batch_size: int = 32
    patience: int = 5

    def __post_init__(self):
        if not 0.0 < self.held_out_fraction < 0.5:
            raise ConfigError("held-out fraction must lie in (0, 0.5)")
        if self.temp_start <= 0 or self.temp_end <= 0 or self.temp_end > self.temp_start:
            raise ConfigError("temperatures must be positive and non-increasing")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")


@dataclass
class SearchResult:
    selection: list[int]
    selected_labels: list[int]
    gamma_trace: list[list[Array]]
    temperatures: list[float]
    stage1_curve: list[float]
    stage2_curve: list[float]
    held_out_indices: Array

    def reselect(self) -> list[int]:
        """Recompute the selection from the saved trajectory (bit-identical)."""
        return [int(np.argmax(g)) for g in self.gamma_trace[-1]]


def _anneal(sched: SearchSchedule, epoch: int) -> float:
    if sched.stage2_epochs <= 1:
        return sched.temp_end
    frac = epoch / (sched.stage2_epochs - 1)
    return float(sched.temp_start * (sched.temp_end / sched.temp_start) ** frac)


def pipelined_search(sn: SuperNet, x: Array, labels: Array, sched: SearchSchedule) -> SearchResult:
    """Two-stage search: uniform one-hot path training, then gamma updates.

    Stage 1 samples one candidate per layer uniformly for every batch and
    applies plain SGD to that path only, with early stop on a training-loss
    plateau. Stage 2 freezes all candidate weights and descends log gamma on
    the held-out split using the J-sample Gumbel gradient of the penalized
    loss, while the temperature anneals geometrically.
    """
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    rng = Rng(sched.seed)
    n_held = max(1, int(round(sched.held_out_fraction * n)))
    if n_held >= n:
        raise DataError("held-out split leaves no training data")
    perm = rng.split(0).permutation(n)
    held_idx, train_idx = perm[:n_held], perm[n_held:]
    x_tr, y_tr = x[train_idx], labels[train_idx]
    x_ho, y_ho = x[held_idx], labels[held_idx]

    stage1_curve = []
    rng_s1 = rng.split(1)
    best = np.inf
    flat = 0
    for _ in range(sched.stage1_epochs):
        order = rng_s1.permutation(len(train_idx))
        losses = []
        for start in range(0, len(train_idx), sched.batch_size):
            idx = order[start : start + sched.batch_size]
            path = [int(rng_s1.integers(0, len(c))) for c in sn.candidates]
            path_net = Network([sn.candidates[l][i] for l, i in enumerate(path)])
            grads, loss = backward(path_net, x_tr[idx], y_tr[idx])
            losses.append(loss)
            for layer, (da, db) in zip(path_net.layers, grads):
                layer.a -= sched.lr_weights * da
                layer.b -= sched.lr_weights * db
        stage1_curve.append(float(np.mean(losses)))
        if stage1_curve[-1] < best - 1e-6:
            best = stage1_curve[-1]
            flat = 0
        else:
            flat += 1
            if flat >= sched.patience:
                break

    gamma_trace = [[lg.copy() for lg in sn.log_gamma]]
    temperatures = []
    stage2_curve = []
    rng_s2 = rng.split(2)
    for epoch in range(sched.stage2_epochs):
        sn.temperature = _anneal(sched, epoch)
        temperatures.append(sn.temperature)
        grads, loss = gamma_gradients(sn, x_ho, y_ho, rng_s2)
        for lg, g in zip(sn.log_gamma, grads):
            lg -= sched.lr_gamma * g
        stage2_curve.append(loss)
        gamma_trace.append([lg.copy() for lg in sn.log_gamma])

    selection = sn.selection()
    selected_labels = (
        [sn.labels[l][i] for l, i in enumerate(selection)] if sn.labels else list(selection)
    )
    return SearchResult(
        selection=selection,
        selected_labels=selected_labels,
        gamma_trace=gamma_trace,
        temperatures=temperatures,
        stage1_curve=stage1_curve,
        stage2_curve=stage2_curve,
        held_out_indices=held_idx,
    )


def precision_supernet(
    pretrained: dict[int, "QuantizedNetwork"],  # noqa: F821  (import cycle)
    candidate_bits,
    eta: float,
    gumbel_samples: int = 4,
) -> SuperNet:
    """Candidates = one dequantized uniform-precision model per bit-width.

    complexity[l][i] = bits_i * params of layer l, the storage cost the
    penalty trades against held-out loss.
    """
    bits = [int(b) for b in candidate_bits]
    for b in bits:
        if b not in pretrained:
            raise ConfigError(f"missing pretrained candidate for {b}-bit")
    nets = {b: pretrained[b].to_network() for b in bits}
    n_layers = len(next(iter(nets.values())).layers)
    candidates, complexity, labels = [], [], []
    for l_idx in range(n_layers):
        row = [copy.deepcopy(nets[b].layers[l_idx]) for b in bits]
        params = row[0].param_count()
        candidates.append(row)
        complexity.append(np.array([b * params for b in bits], dtype=np.float64))
        labels.append(list(bits))
    log_gamma = [np.zeros(len(bits)) for _ in range(n_layers)]
    return SuperNet(candidates, log_gamma, complexity, penalty=eta,
                    gumbel_samples=gumbel_samples, labels=labels)


def precision_nas(
    pretrained: dict[int, "QuantizedNetwork"],  # noqa: F821
    x: Array,
    labels: Array,
    candidate_bits,
    eta: float,
    sched: SearchSchedule,
):
    """Per-layer bit selection via architecture search over pretrained models.

    Stage 1 is the ADMM pretraining that produced `pretrained`, so only the
    gamma stage runs here. Returns (PrecisionAssignment, SearchResult).
    """
    from .sensitivity import PrecisionAssignment

    sn = precision_supernet(pretrained, candidate_bits, eta)
    sched = copy.deepcopy(sched)
    sched.stage1_epochs = 0
    result = pipelined_search(sn, x, labels, sched)
    some_net = pretrained[int(candidate_bits[0])].to_network()
    assignment = PrecisionAssignment(
        bits=result.selected_labels,
        param_counts=[layer.param_count() for layer in some_net.layers],
    )
    return assignment, result
