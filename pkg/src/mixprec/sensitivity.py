"""Layer-wise quantization sensitivity and budget-constrained bit allocation.

Two metrics rank how much a layer suffers at a given precision: the KL
divergence between the full-precision and single-layer-quantized output
distributions, and the loss-curvature measure trace(H_l) * ||quantization
error||^2 with the trace estimated stochastically. A knapsack-style dynamic
program then picks per-layer bit-widths minimizing total sensitivity under a
parameter-weighted average-bits budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, InfeasibleBudgetError
from .model import Network, backward, forward
from .numeric import Array, as_tensor, hvp
from .quant import SUPPORTED_BITS, _layer_theta, _split_codes, optimize_scale, quantize_layer
from .rng import Rng


@dataclass
class SensitivityTable:
    """Sensitivity entries Omega[layer][bit] for one metric.

    entries has shape (num_layers, len(candidate_bits)); metric is "kl" or
    "hessian". probe_count / frame_count record how much data produced it.
    """

    entries: Array
    candidate_bits: tuple[int, ...]
    metric: str
    probe_count: int = 0
    frame_count: int = 0

    def __post_init__(self):
        self.entries = as_tensor(self.entries)
        self.candidate_bits = tuple(int(b) for b in self.candidate_bits)
        if self.entries.ndim != 2 or self.entries.shape[1] != len(self.candidate_bits):
            raise ConfigError("entries must be (layers x candidate bits)")
        if np.any(self.entries < 0):
            raise ConfigError("sensitivities must be non-negative")

    @property
    def num_layers(self) -> int:
        return self.entries.shape[0]

    def omega(self, layer: int, n_bits: int) -> float:
        return float(self.entries[layer, self.candidate_bits.index(n_bits)])


@dataclass
class PrecisionAssignment:
    """Per-layer bit-widths with parameter-count weights and budget accounting."""

    bits: list[int]
    param_counts: list[int]
    target_avg_bits: float | None = None
    total_sensitivity: float = 0.0

    def __post_init__(self):
        if len(self.bits) != len(self.param_counts):
            raise ConfigError("need one parameter count per layer")
        self.bits = [int(b) for b in self.bits]
        self.param_counts = [int(p) for p in self.param_counts]

    @property
    def total_param_bits(self) -> int:
        return sum(b * p for b, p in zip(self.bits, self.param_counts))

    @property
    def weighted_avg_bits(self) -> float:
        total = sum(self.param_counts)
        return self.total_param_bits / total if total else 0.0

    @property
    def unweighted_avg_bits(self) -> float:
        return sum(self.bits) / len(self.bits) if self.bits else 0.0

    @property
    def distance_to_target(self) -> float | None:
        if self.target_avg_bits is None:
            return None
        return self.target_avg_bits - self.weighted_avg_bits


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def output_distribution(logits: Array) -> Array:
    """Per-frame probability vectors: sigmoid gate, then L1 normalization."""
    s = _sigmoid(logits)
    return s / s.sum(axis=1, keepdims=True)


def quantize_single_layer(net: Network, layer: int, n_bits: int) -> Network:
    """Copy of net with only `layer` quantized (scale re-fit for that layer)."""
    out = net.clone()
    out.layers[layer] = quantize_layer(net.layers[layer], n_bits).to_layer()
    return out


def kl_sensitivity(net: Network, layer: int, n_bits: int, frames: Array) -> float:
    """KL divergence (full || single-layer-quantized) summed over frames.

    Both output distributions pass through the sigmoid gate and per-frame
    normalization, so the result is always >= 0 and exactly 0 when the
    quantized layer reproduces its weights.
    """
    frames = as_tensor(frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DataError("need a non-empty (frames x dim) evaluation matrix")
    qnet = quantize_single_layer(net, layer, n_bits)
    p = output_distribution(forward(net, frames)[-1])
    q = output_distribution(forward(qnet, frames)[-1])
    return float(np.sum(p * np.log(p / q)))


def hutchinson_trace(grad_fn, theta: Array, num_probes: int, rng: Rng) -> tuple[float, float]:
    """Stochastic trace estimate: mean over Rademacher probes of v^T H v.

    Returns (estimate, standard error of the mean).
    """
    if num_probes < 1:
        raise ConfigError("need at least one probe")
    theta = as_tensor(theta)
    samples = np.empty(num_probes)
    for i in range(num_probes):
        v = rng.rademacher(theta.shape)
        samples[i] = float(np.dot(v.ravel(), hvp(grad_fn, theta, v).ravel()))
    stderr = float(samples.std(ddof=1) / math.sqrt(num_probes)) if num_probes > 1 else 0.0
    return float(samples.mean()), stderr


def layer_grad_fn(net: Network, layer: int, x: Array, labels: Array):
    """Full-batch loss gradient restricted to one layer's parameters."""
    work = net.clone()
    shape_a = work.layers[layer].a.shape

    def grad(theta: Array) -> Array:
        work.layers[layer].a = theta[: shape_a[0] * shape_a[1]].reshape(shape_a)
        work.layers[layer].b = theta[shape_a[0] * shape_a[1] :].reshape(
            work.layers[layer].b.shape
        )
        grads, _ = backward(work, x, labels)
        da, db = grads[layer]
        return np.concatenate([da.ravel(), db.ravel()])

    return grad


def layer_trace(
    net: Network, layer: int, x: Array, labels: Array, num_probes: int, rng: Rng
) -> tuple[float, float]:
    """Hutchinson trace of the loss Hessian wrt one layer's parameters."""
    theta = _layer_theta(net.layers[layer])
    return hutchinson_trace(layer_grad_fn(net, layer, x, labels), theta, num_probes, rng)


def curvature_sensitivity(
    net: Network,
    layer: int,
    n_bits: int,
    x: Array,
    labels: Array,
    num_probes: int,
    rng: Rng,
    trace: float | None = None,
) -> float:
    """Trace-weighted squared quantization error for one (layer, bits) cell.

    Negative trace estimates (possible away from a strict optimum) clamp to
    zero so the sensitivity stays non-negative. A precomputed trace may be
    passed to share one estimate across bit-widths.
    """
    if trace is None:
        trace, _ = layer_trace(net, layer, x, labels, num_probes, rng)
    fit = optimize_scale(_layer_theta(net.layers[layer]), n_bits)
    return max(trace, 0.0) * fit.error


def kl_table(net: Network, candidate_bits, frames: Array) -> SensitivityTable:
    bits = tuple(int(b) for b in candidate_bits)
    entries = np.zeros((len(net.layers), len(bits)))
    for l_idx in range(len(net.layers)):
        for b_idx, n in enumerate(bits):
            entries[l_idx, b_idx] = kl_sensitivity(net, l_idx, n, frames)
    return SensitivityTable(entries, bits, "kl", frame_count=frames.shape[0])


def hessian_table(
    net: Network, candidate_bits, x: Array, labels: Array, num_probes: int, rng: Rng
) -> SensitivityTable:
    """Curvature table; one trace estimate per layer shared across bit-widths."""
    bits = tuple(int(b) for b in candidate_bits)
    entries = np.zeros((len(net.layers), len(bits)))
    for l_idx in range(len(net.layers)):
        tr, _ = layer_trace(net, l_idx, x, labels, num_probes, rng.split(l_idx))
        for b_idx, n in enumerate(bits):
            fit = optimize_scale(_layer_theta(net.layers[l_idx]), n)
            entries[l_idx, b_idx] = max(tr, 0.0) * fit.error
    return SensitivityTable(entries, bits, "hessian", probe_count=num_probes,
                            frame_count=x.shape[0])


def allocate_bits(
    table: SensitivityTable,
    param_counts,
    target_avg_bits: float,
    candidate_bits=None,
) -> PrecisionAssignment:
    """Exact minimizer of total sensitivity under the bit budget.

    The budget is parameter-weighted: sum_l params_l * n_l <=
    target_avg_bits * total params, solved by dynamic programming over
    layers x bit-budget (grid unit: one parameter at one bit). Among
    equal-sensitivity solutions the smaller total-bit one wins.
    """
    bits = tuple(sorted(int(b) for b in (candidate_bits or table.candidate_bits)))
    for b in bits:
        if b not in table.candidate_bits:
            raise ConfigError(f"no sensitivity column for {b}-bit")
        if b not in SUPPORTED_BITS:
            raise ConfigError(f"unsupported bit-width {b}")
    params = [int(p) for p in param_counts]
    n_layers = table.num_layers
    if len(params) != n_layers:
        raise ConfigError("need one parameter count per table row")
    total_params = sum(params)
    budget = math.floor(target_avg_bits * total_params)
    if min(bits) * total_params > budget:
        raise InfeasibleBudgetError(
            f"target {target_avg_bits} average bits is below the {min(bits)}-bit floor"
        )

    # Shrink the budget grid by the gcd of the per-layer costs.
    g = 0
    for p in params:
        for b in bits:
            g = math.gcd(g, p * b)
    g = max(g, 1)
    budget //= g

    inf = np.inf
    cost = np.full(budget + 1, inf)
    cost[0] = 0.0
    choices = np.full((n_layers, budget + 1), -1, dtype=np.int16)
    for l_idx in range(n_layers):
        new_cost = np.full(budget + 1, inf)
        new_choice = np.full(budget + 1, -1, dtype=np.int16)
        for c_idx, b in enumerate(bits):
            w = params[l_idx] * b // g
            if w > budget:
                continue
            omega = table.omega(l_idx, b)
            shifted = np.full(budget + 1, inf)
            shifted[w:] = cost[: budget + 1 - w] + omega
            better = shifted < new_cost
            new_cost[better] = shifted[better]
            new_choice[better] = c_idx
        cost = new_cost
        choices[l_idx] = new_choice

    feasible = np.flatnonzero(np.isfinite(cost))
    if feasible.size == 0:
        raise InfeasibleBudgetError("no feasible assignment under the budget")
    # Exact-budget states make the smaller-total-bits tie-break automatic:
    # scan budgets ascending and keep the first minimum.
    best_b = int(feasible[np.argmin(cost[feasible])])
    total = float(cost[best_b])

    assigned = []
    b_cur = best_b
    for l_idx in range(n_layers - 1, -1, -1):
        c_idx = int(choices[l_idx, b_cur])
        assigned.append(bits[c_idx])
        b_cur -= params[l_idx] * bits[c_idx] // g
    assigned.reverse()
    return PrecisionAssignment(
        bits=assigned,
        param_counts=params,
        target_avg_bits=float(target_avg_bits),
        total_sensitivity=total,
    )
