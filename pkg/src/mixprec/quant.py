"""Symmetric quantization tables, scale fitting, and quantized training.

A table at n bits with scale alpha holds the levels {0, +/-alpha, ...,
+/-alpha*(2^(n-1)-1)}; the 1-bit case is binarization {-alpha, +alpha}.
One table is shared by both factors of a layer (cluster = layer).

Three parameter-estimation schemes operate on top of the tables:
modified back-propagation (straight-through updates against fixed tables),
QAT (straight-through plus per-epoch scale re-fitting), and ADMM (augmented
loss pulling weights onto the grid via an auxiliary copy and dual variable).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .model import FactoredLayer, Network, TrainConfig, backward, cross_entropy
from .numeric import Array, as_tensor
from .rng import Rng

SUPPORTED_BITS = (1, 2, 4, 8, 16)

# Above this many sweep events optimize_scale falls back to multi-start
# alternating minimization (only reached at 16 bits on large layers).
_SWEEP_EVENT_LIMIT = 2_000_000


@dataclass(frozen=True)
class QuantTable:
    """Bit-width plus full-precision scale defining a symmetric level set."""

    n_bits: int
    alpha: float

    def __post_init__(self):
        if self.n_bits not in SUPPORTED_BITS:
            raise ConfigError(f"unsupported bit-width {self.n_bits}; expected {SUPPORTED_BITS}")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ConfigError(f"scale must be a positive finite float, got {self.alpha}")

    @property
    def max_code(self) -> int:
        """Largest level index magnitude (1 for the binary table)."""
        return 1 if self.n_bits == 1 else 2 ** (self.n_bits - 1) - 1

    def levels(self) -> Array:
        """Explicit sorted level sequence."""
        if self.n_bits == 1:
            return np.array([-self.alpha, self.alpha])
        k = self.max_code
        return self.alpha * np.arange(-k, k + 1, dtype=np.float64)

    def codes_valid(self, codes: Array) -> bool:
        codes = np.asarray(codes)
        if self.n_bits == 1:
            return bool(np.all(np.abs(codes) == 1))
        return bool(np.all(np.abs(codes) <= self.max_code))


def build_table(n_bits: int, alpha: float) -> QuantTable:
    return QuantTable(n_bits=n_bits, alpha=float(alpha))


def nearest_codes(theta: Array, n_bits: int, alpha: float) -> Array:
    """Level indices minimizing |theta - alpha*q| elementwise.

    Ties break toward the smaller-magnitude level; the equal-magnitude 1-bit
    tie at exactly zero resolves to +1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NumericError("cannot quantize non-finite values")
    if n_bits == 1:
        return np.where(theta >= 0.0, 1, -1).astype(np.int64)
    k = 2 ** (n_bits - 1) - 1
    mag = np.ceil(np.abs(theta) / alpha - 0.5)
    return (np.sign(theta) * np.minimum(mag, k)).astype(np.int64)


def quantize_nearest(theta, table: QuantTable):
    """Snap value(s) to the table; returns (level value, code index).

    Scalar in, scalar out; arrays map elementwise.
    """
    arr = np.asarray(theta, dtype=np.float64)
    codes = nearest_codes(arr, table.n_bits, table.alpha)
    values = table.alpha * codes
    if np.isscalar(theta) or arr.ndim == 0:
        return float(values), int(codes)
    return values, codes


@dataclass
class ScaleFit:
    """Result of fitting one cluster's scale: alpha, codes, summed squared error."""

    alpha: float
    codes: Array
    error: float
    degenerate: bool = False

    @property
    def values(self) -> Array:
        return self.alpha * self.codes


def _sq_error(theta: Array, alpha: float, codes: Array) -> float:
    return float(np.sum((theta - alpha * codes) ** 2))


def _alternate(theta: Array, n_bits: int, alpha: float, max_iters: int = 60) -> tuple[float, Array]:
    """Alternating minimization: snap codes, then closed-form alpha, to a fixed point."""
    codes = nearest_codes(theta, n_bits, alpha)
    for _ in range(max_iters):
        s2 = float(np.sum(codes.astype(np.float64) ** 2))
        if s2 == 0.0:
            break
        new_alpha = float(np.sum(np.abs(theta) * np.abs(codes)) / s2)
        if new_alpha <= 0.0:
            break
        new_codes = nearest_codes(theta, n_bits, new_alpha)
        if new_alpha == alpha and np.array_equal(new_codes, codes):
            break
        alpha, codes = new_alpha, new_codes
    return alpha, codes


def _sweep_candidates(mags: Array, k_max: int) -> tuple[Array, Array, Array]:
    """All code-change events as (alpha, dS1, dS2), alpha descending.

    Crossing below alpha = m/(k+0.5) bumps that element's |code| from k to
    k+1, adding m to S1 = sum(m*|q|) and 2k+1 to S2 = sum(q^2).
    """
    m = mags[mags > 0.0]
    ks = np.arange(k_max, dtype=np.float64)
    alphas = (m[:, None] / (ks[None, :] + 0.5)).ravel()
    ds1 = np.repeat(m, k_max)
    ds2 = np.tile(2.0 * ks + 1.0, m.size)
    order = np.argsort(-alphas, kind="stable")
    return alphas[order], ds1[order], ds2[order]


def _exact_sweep(theta: Array, n_bits: int) -> float:
    """Globally optimal alpha for the squared-error objective.

    The error is piecewise quadratic in alpha with breakpoints where some
    element's nearest code changes; on each piece the minimizer is the
    closed-form alpha for that piece's codes, clipped into the piece.
    """
    mags = np.abs(theta)
    k_max = 2 ** (n_bits - 1) - 1
    alphas, ds1, ds2 = _sweep_candidates(mags, k_max)
    q_total = float(np.sum(theta**2))
    s1 = np.cumsum(ds1)
    s2 = np.cumsum(ds2)
    hi = alphas
    lo = np.empty_like(alphas)
    lo[:-1] = alphas[1:]
    lo[-1] = np.finfo(np.float64).tiny
    star = np.clip(s1 / s2, lo, hi)
    err = q_total - 2.0 * star * s1 + star**2 * s2
    best = int(np.argmin(err))
    return float(star[best])


def _recover_exact(theta: Array, n_bits: int, codes: Array) -> float | None:
    """If theta is exactly alpha*codes for a recoverable alpha, return it.

    Dividing by a power-of-two code is exact in floating point, so when any
    such code exists and the reconstruction reproduces theta bit-for-bit the
    original scale of an already-quantized cluster is recovered exactly.
    """
    mags = np.abs(codes)
    candidates = []
    p = 1
    while p <= (1 if n_bits == 1 else 2 ** (n_bits - 1) - 1) and len(candidates) < 8:
        idx = np.flatnonzero(mags == p)
        if idx.size:
            candidates.append(abs(float(theta.ravel()[idx[0]])) / p)
        p *= 2
    for alpha in candidates:
        if alpha > 0 and np.array_equal(alpha * codes, theta):
            return alpha
    return None


def optimize_scale(weights: Array, n_bits: int) -> ScaleFit:
    """Fit the cluster scale minimizing the summed squared quantization error.

    Uses an exact breakpoint sweep to initialize the alternating
    snap-codes / closed-form-alpha iteration (multi-start fallback when the
    sweep would be too large), so the result is never worse than the naive
    max|theta|/(2^(n-1)-1) starting scale. All-zero input is degenerate and
    flagged rather than an error.
    """
    theta = as_tensor(weights).ravel()
    if theta.size == 0:
        raise ShapeError("cannot fit a scale to an empty weight vector")
    if n_bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {n_bits}; expected {SUPPORTED_BITS}")
    if not np.all(np.isfinite(theta)):
        raise NumericError("weights contain NaN or Inf")

    m_max = float(np.max(np.abs(theta)))
    if m_max == 0.0:
        codes = nearest_codes(theta, n_bits, 1.0)
        return ScaleFit(alpha=1.0, codes=codes, error=_sq_error(theta, 1.0, codes), degenerate=True)

    if n_bits == 1:
        alpha = float(np.mean(np.abs(theta)))
        codes = nearest_codes(theta, 1, alpha)
        return ScaleFit(alpha=alpha, codes=codes, error=_sq_error(theta, alpha, codes))

    k_max = 2 ** (n_bits - 1) - 1
    nnz = int(np.count_nonzero(theta))
    starts: list[float]
    if nnz * k_max <= _SWEEP_EVENT_LIMIT:
        starts = [_exact_sweep(theta, n_bits)]
    else:
        starts = list(np.geomspace(m_max / k_max / 4.0, 2.0 * m_max, num=33))
    starts.append(m_max / k_max)

    best: tuple[float, float, Array] | None = None
    for a0 in starts:
        alpha, codes = _alternate(theta, n_bits, a0)
        for cand in (a0, alpha):
            c = nearest_codes(theta, n_bits, cand)
            e = _sq_error(theta, cand, c)
            if best is None or e < best[0]:
                best = (e, cand, c)
    err, alpha, codes = best  # type: ignore[misc]

    exact = _recover_exact(theta, n_bits, codes)
    if exact is not None:
        return ScaleFit(alpha=exact, codes=codes, error=0.0)
    return ScaleFit(alpha=alpha, codes=codes, error=err)


@dataclass
class QuantizedLayer:
    """A factored layer stored as level indices plus its shared table."""

    codes_a: Array
    codes_b: Array
    table: QuantTable
    activation: str = "identity"
    context_offsets: tuple[int, ...] = ()

    def __post_init__(self):
        self.codes_a = np.asarray(self.codes_a, dtype=np.int64)
        self.codes_b = np.asarray(self.codes_b, dtype=np.int64)
        if not (self.table.codes_valid(self.codes_a) and self.table.codes_valid(self.codes_b)):
            raise ConfigError("level index outside table range")

    def param_count(self) -> int:
        return self.codes_a.size + self.codes_b.size

    def to_layer(self) -> FactoredLayer:
        """Dequantize: every value is exactly alpha * code."""
        return FactoredLayer(
            a=self.table.alpha * self.codes_a,
            b=self.table.alpha * self.codes_b,
            activation=self.activation,
            context_offsets=self.context_offsets,
        )


@dataclass
class QuantizedNetwork:
    """Per-layer quantized factors, optionally with the full-precision shadow."""

    qlayers: list[QuantizedLayer]
    shadow: Network | None = None
    loss_curve: list[float] = field(default_factory=list)

    def to_network(self) -> Network:
        return Network([ql.to_layer() for ql in self.qlayers])

    def param_count(self) -> int:
        return sum(ql.param_count() for ql in self.qlayers)

    def bits(self) -> list[int]:
        return [ql.table.n_bits for ql in self.qlayers]


def _assignment_bits(assignment, n_layers: int) -> list[int]:
    bits = list(getattr(assignment, "bits", assignment))
    if len(bits) != n_layers:
        raise ConfigError(f"assignment covers {len(bits)} layers; model has {n_layers}")
    for n in bits:
        if n not in SUPPORTED_BITS:
            raise ConfigError(f"unsupported bit-width {n} in assignment")
    return [int(n) for n in bits]


def _split_codes(layer: FactoredLayer, codes: Array) -> tuple[Array, Array]:
    na = layer.a.size
    return codes[:na].reshape(layer.a.shape), codes[na:].reshape(layer.b.shape)


def _layer_theta(layer: FactoredLayer) -> Array:
    return np.concatenate([layer.a.ravel(), layer.b.ravel()])


def quantize_layer(layer: FactoredLayer, n_bits: int) -> QuantizedLayer:
    fit = optimize_scale(_layer_theta(layer), n_bits)
    codes_a, codes_b = _split_codes(layer, fit.codes)
    return QuantizedLayer(
        codes_a=codes_a,
        codes_b=codes_b,
        table=build_table(n_bits, fit.alpha),
        activation=layer.activation,
        context_offsets=layer.context_offsets,
    )


def quantize_model(net: Network, assignment) -> QuantizedNetwork:
    """Offline quantization: fit one table per layer and snap both factors.

    `assignment` is a per-layer bit sequence or anything with a `.bits`
    attribute. Re-quantizing the dequantized result is a fixed point.
    """
    bits = _assignment_bits(assignment, len(net.layers))
    return QuantizedNetwork(
        qlayers=[quantize_layer(layer, n) for layer, n in zip(net.layers, bits)]
    )


def dequantize(qnet: QuantizedNetwork) -> Network:
    return qnet.to_network()


def _snap_network(shadow: Network, tables: list[QuantTable]) -> tuple[Network, list[QuantizedLayer]]:
    """Quantize shadow weights against fixed tables (codes re-snapped, scales kept)."""
    qlayers = []
    for layer, table in zip(shadow.layers, tables):
        qlayers.append(
            QuantizedLayer(
                codes_a=nearest_codes(layer.a, table.n_bits, table.alpha),
                codes_b=nearest_codes(layer.b, table.n_bits, table.alpha),
                table=table,
                activation=layer.activation,
                context_offsets=layer.context_offsets,
            )
        )
    return Network([ql.to_layer() for ql in qlayers]), qlayers


def _fit_tables(shadow: Network, bits: list[int]) -> list[QuantTable]:
    return [
        build_table(n, optimize_scale(_layer_theta(layer), n).alpha)
        for layer, n in zip(shadow.layers, bits)
    ]


def ste_gradients(shadow: Network, tables: list[QuantTable], x: Array, labels: Array):
    """Straight-through gradients: forward at quantized weights, quantizer
    treated as identity in the backward pass, so the returned direction is
    the analytic loss gradient evaluated at the dequantized point."""
    qnet, _ = _snap_network(shadow, tables)
    return backward(qnet, x, labels)


def train_modified_bp(
    net: Network, x: Array, labels: Array, assignment, cfg: TrainConfig
) -> QuantizedNetwork:
    """Straight-through training against tables fixed at their initial fit.

    Quantized weights drive the forward pass; updates land on full-precision
    shadow parameters. Deterministic given cfg.seed.
    """
    bits = _assignment_bits(assignment, len(net.layers))
    shadow = net.clone()
    tables = _fit_tables(shadow, bits)
    rng = Rng(cfg.seed)
    n = x.shape[0]
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads, loss = ste_gradients(shadow, tables, x[idx], labels[idx])
            losses.append(loss)
            if cfg.learning_rate > 0.0:
                for layer, (da, db) in zip(shadow.layers, grads):
                    layer.a -= cfg.learning_rate * da
                    layer.b -= cfg.learning_rate * db
        curve.append(float(np.mean(losses)))
    _, qlayers = _snap_network(shadow, tables)
    return QuantizedNetwork(qlayers=qlayers, shadow=shadow, loss_curve=curve)


def train_qat(net: Network, x: Array, labels: Array, assignment, cfg: TrainConfig) -> QuantizedNetwork:
    """Straight-through fine-tuning that re-fits every scale each epoch.

    Keeps the best model by quantized training loss, so the result is never
    worse than plain offline quantization; zero epochs returns exactly the
    offline model.
    """
    bits = _assignment_bits(assignment, len(net.layers))
    shadow = net.clone()
    rng = Rng(cfg.seed)
    n = x.shape[0]

    def snapshot(sh: Network) -> tuple[float, QuantizedNetwork]:
        q = quantize_model(sh, bits)
        loss = cross_entropy(q.to_network(), x, labels)
        q.shadow = sh.clone()
        return loss, q

    best_loss, best = snapshot(shadow)
    curve = [best_loss]
    for _ in range(cfg.epochs):
        tables = _fit_tables(shadow, bits)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads, _ = ste_gradients(shadow, tables, x[idx], labels[idx])
            if cfg.learning_rate > 0.0:
                for layer, (da, db) in zip(shadow.layers, grads):
                    layer.a -= cfg.learning_rate * da
                    layer.b -= cfg.learning_rate * db
        loss, q = snapshot(shadow)
        curve.append(loss)
        if loss < best_loss:
            best_loss, best = loss, q
    best.loss_curve = curve
    return best


@dataclass
class AdmmState:
    """Dual variables, penalty, and the grid-constrained auxiliary copy."""

    u: list[Array]
    rho: float
    q: list[Array]


@dataclass
class AdmmTrace:
    residuals: list[float] = field(default_factory=list)
    rhos: list[float] = field(default_factory=list)


def admm_quantize(
    theta: Array,
    n_bits: int,
    rho: float,
    iterations: int,
    lr: float = 0.5,
    grad_fn=None,
    sgd_steps: int = 1,
) -> tuple[Array, ScaleFit, list[float]]:
    """Vector-level ADMM: drive theta onto a quantization grid.

    grad_fn supplies the smooth-loss gradient (None means zero loss, pure
    grid projection). Returns (theta, final fit of theta+u, residual history).
    """
    theta = as_tensor(theta).ravel().copy()
    u = np.zeros_like(theta)
    fit = optimize_scale(theta, n_bits)
    q = fit.values
    residuals = []
    for _ in range(iterations):
        for _ in range(sgd_steps):
            g = np.zeros_like(theta) if grad_fn is None else as_tensor(grad_fn(theta))
            theta -= lr * (g + rho * (theta - q + u))
        fit = optimize_scale(theta + u, n_bits)
        q = fit.values
        u += theta - q
        residuals.append(float(np.linalg.norm(theta - q)))
    return theta, fit, residuals


def default_admm_rho(net: Network, x: Array, labels: Array) -> float:
    """Scale-aware default: 0.01 * mean|grad| / mean|theta| at the start."""
    grads, _ = backward(net, x, labels)
    gsum, gcount, tsum, tcount = 0.0, 0, 0.0, 0
    for layer, (da, db) in zip(net.layers, grads):
        gsum += float(np.abs(da).sum() + np.abs(db).sum())
        gcount += da.size + db.size
        tsum += float(np.abs(layer.a).sum() + np.abs(layer.b).sum())
        tcount += layer.param_count()
    mean_grad = gsum / max(gcount, 1)
    mean_theta = tsum / max(tcount, 1)
    if mean_theta == 0.0:
        return 0.01
    return max(0.01 * mean_grad / mean_theta, 1e-8)


def train_admm(
    net: Network,
    x: Array,
    labels: Array,
    assignment,
    cfg: TrainConfig,
    rho: float | None = None,
) -> tuple[QuantizedNetwork, AdmmTrace]:
    """ADMM training: SGD on the rho-augmented loss, grid projection of
    theta+u with a re-fit scale, then the dual update u += theta - q.

    The penalty is halved after three consecutive iterations without
    residual progress. One iteration = one epoch of the theta-update.
    """
    bits = _assignment_bits(assignment, len(net.layers))
    shadow = net.clone()
    if rho is None:
        rho = default_admm_rho(shadow, x, labels)
    if rho <= 0:
        raise ConfigError("ADMM penalty rho must be positive")
    rng = Rng(cfg.seed)
    n = x.shape[0]

    u = [np.zeros(layer.param_count()) for layer in shadow.layers]
    qlayers = [quantize_layer(layer, nb) for layer, nb in zip(shadow.layers, bits)]
    q = [np.concatenate([ql.table.alpha * ql.codes_a.ravel(),
                         ql.table.alpha * ql.codes_b.ravel()]) for ql in qlayers]
    trace = AdmmTrace()
    stall = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads, _ = backward(shadow, x[idx], labels[idx])
            for li, (layer, (da, db)) in enumerate(zip(shadow.layers, grads)):
                theta = _layer_theta(layer)
                penalty = rho * (theta - q[li] + u[li])
                pa, pb = _split_codes(layer, penalty)
                layer.a -= cfg.learning_rate * (da + pa)
                layer.b -= cfg.learning_rate * (db + pb)
        qlayers = []
        residual_sq = 0.0
        for li, (layer, nb) in enumerate(zip(shadow.layers, bits)):
            theta = _layer_theta(layer)
            fit = optimize_scale(theta + u[li], nb)
            codes_a, codes_b = _split_codes(layer, fit.codes)
            qlayers.append(
                QuantizedLayer(
                    codes_a=codes_a, codes_b=codes_b,
                    table=build_table(nb, fit.alpha),
                    activation=layer.activation,
                    context_offsets=layer.context_offsets,
                )
            )
            q[li] = fit.values
            u[li] += theta - q[li]
            residual_sq += float(np.sum((theta - q[li]) ** 2))
        residual = float(np.sqrt(residual_sq))
        if trace.residuals and residual > 0.999 * trace.residuals[-1]:
            stall += 1
            if stall >= 3:
                rho *= 0.5
                stall = 0
        else:
            stall = 0
        trace.residuals.append(residual)
        trace.rhos.append(rho)
    return QuantizedNetwork(qlayers=qlayers, shadow=shadow), trace
