"""Differential-privacy engine: per-example clipping, Gaussian noising,
Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism, and
noise calibration toward a target epsilon.

Accounting composes Renyi divergences over the integer order grid
alpha in {2..256} and converts to (epsilon, delta) with

    epsilon = min_alpha [ sum_steps rdp(q, sigma, alpha) + ln(1/delta)/(alpha-1) ].

For q < 1 the per-step Renyi divergence uses the binomial expansion of the
subsampled Gaussian moment, evaluated in log space:

    rdp(alpha) = ln( sum_{k=0..alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                     * exp(k(k-1) / (2 sigma^2)) ) / (alpha - 1)

and for q == 1 it reduces to the plain Gaussian value alpha / (2 sigma^2).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DataError
from .nn import GradientSet
from .optim import OptimizerState, apply_step

DEFAULT_DELTA = 1e-5
DEFAULT_CLIP_NORM = 1.0
ORDER_GRID = tuple(range(2, 257))

SIGMA_BRACKET = (0.01, 1e4)
SIGMA_REL_TOL = 1e-4

# log(k!) for k = 0..max(ORDER_GRID); enough for every binomial term we need.
_LOG_FACTORIAL = np.concatenate(
    ([0.0], np.cumsum(np.log(np.arange(1, ORDER_GRID[-1] + 1))))
)


@dataclass
class DpConfig:
    """Per-run privacy parameters.

    Exactly one of target_epsilon / noise_multiplier drives the noise level:
    with a target, `calibrate_sigma` picks the multiplier before training.
    sample_rate is expected batch over dataset size; with `fixed` sampling it
    is the nominal rate used for accounting (an approximation, documented in
    the README) while updates divide by the realized batch size.
    """

    target_epsilon: float | None = None
    noise_multiplier: float | None = None
    delta: float = DEFAULT_DELTA
    clip_norm: float = DEFAULT_CLIP_NORM
    sample_rate: float = 0.0
    sampling: str = "poisson"  # "poisson" | "fixed"

    def validate(self) -> None:
        if (self.target_epsilon is None) == (self.noise_multiplier is None):
            raise DataError(
                "exactly one of target_epsilon and noise_multiplier must be set"
            )
        if self.target_epsilon is not None and self.target_epsilon <= 0:
            raise DataError("target epsilon must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise DataError("noise multiplier must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise DataError("delta must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise DataError("clip norm must be positive")
        # sample_rate 0.0 means "not yet resolved"; resolution fills it in.
        if self.sample_rate and not 0.0 < self.sample_rate <= 1.0:
            raise DataError("sample rate must lie in (0, 1]")
        if self.sampling not in ("poisson", "fixed"):
            raise DataError(f"unknown sampling mode {self.sampling!r}")


def clip_per_sample(
    grads: list[GradientSet], clip_norm: float
) -> tuple[list[GradientSet], list[float]]:
    """Scales each example's gradient to L2 norm at most clip_norm.

    The norm is over the full flattened gradient (all layers). Gradients
    already inside the ball are passed through untouched, so the no-clip
    case is bit-exact.
    """
    if clip_norm <= 0:
        raise DataError("clip norm must be positive")
    clipped = []
    norms = []
    for gs in grads:
        sq = 0.0
        for dw, db in gs:
            sq += float(np.sum(dw * dw)) + float(np.sum(db * db))
        if not math.isfinite(sq):
            raise DataError("non-finite gradient in clip input")
        norm = math.sqrt(sq)
        norms.append(norm)
        if norm <= clip_norm:
            clipped.append(gs)
        else:
            scale = clip_norm / norm
            clipped.append([(dw * scale, db * scale) for dw, db in gs])
    return clipped, norms


def noisy_aggregate(
    clipped: list[GradientSet],
    clip_norm: float,
    noise_multiplier: float,
    expected_batch: float,
    rng: np.random.Generator | None,
    shapes: list[tuple[tuple[int, ...], tuple[int, ...]]] | None = None,
) -> GradientSet:
    """(sum of clipped gradients + N(0, (sigma * C)^2 I)) / expected_batch.

    An empty batch is valid under Poisson sampling; its aggregate is pure
    noise (or zero when sigma == 0), which requires `shapes` to know the
    tensor layout. No noise is drawn when sigma == 0, so the RNG stream is
    untouched in the degenerate case.
    """
    if expected_batch <= 0:
        raise DataError("expected batch size must be positive")
    if noise_multiplier < 0:
        raise DataError("noise multiplier must be nonnegative")
    if clipped:
        shapes = [(dw.shape, db.shape) for dw, db in clipped[0]]
    elif shapes is None:
        raise DataError("empty batch needs explicit gradient shapes")
    total = [
        (np.zeros(ws), np.zeros(bs)) for ws, bs in shapes
    ]
    for gs in clipped:
        for (tw, tb), (dw, db) in zip(total, gs):
            tw += dw
            tb += db
    if noise_multiplier > 0:
        if rng is None:
            raise DataError("noise draw requires an RNG")
        std = noise_multiplier * clip_norm
        for tw, tb in total:
            tw += rng.normal(0.0, std, size=tw.shape)
            tb += rng.normal(0.0, std, size=tb.shape)
    return [(tw / expected_batch, tb / expected_batch) for tw, tb in total]


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Renyi divergence of one Poisson-subsampled Gaussian step at order alpha.

    Returns math.inf when sigma == 0 with q > 0 (unbounded privacy loss).
    """
    if not 0.0 <= q <= 1.0:
        raise DataError("sample rate must lie in [0, 1]")
    if not (isinstance(alpha, (int, np.integer)) and alpha >= 2):
        raise DataError("order must be an integer >= 2")
    if sigma < 0:
        raise DataError("sigma must be nonnegative")
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    k = np.arange(alpha + 1)
    log_terms = (
        _LOG_FACTORIAL[alpha]
        - _LOG_FACTORIAL[k]
        - _LOG_FACTORIAL[alpha - k]
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2.0 * sigma * sigma)
    )
    peak = float(np.max(log_terms))
    log_sum = peak + math.log(float(np.sum(np.exp(log_terms - peak))))
    return log_sum / (alpha - 1)


@dataclass
class PrivacyLedger:
    """Append-only record of (sample rate, noise multiplier) per step."""

    records: list[tuple[float, float]] = field(default_factory=list)
    orders: tuple[int, ...] = ORDER_GRID

    def record_step(self, q: float, sigma: float) -> None:
        self.records.append((float(q), float(sigma)))

    def __len__(self) -> int:
        return len(self.records)

    def epsilon(self, delta: float) -> tuple[float, int]:
        """Spent (epsilon, best order) at the given delta; (0, min order) if empty."""
        return epsilon_from_ledger(self, delta)

    def csv_rows(self, delta: float = DEFAULT_DELTA) -> list[str]:
        """Dump rows `step,q,sigma,spent_epsilon` with cumulative epsilon."""
        rows = []
        partial = PrivacyLedger(orders=self.orders)
        for i, (q, sigma) in enumerate(self.records, start=1):
            partial.record_step(q, sigma)
            eps, _ = partial.epsilon(delta)
            rows.append(f"{i},{q:.10g},{sigma:.10g},{eps:.10g}")
        return rows


def epsilon_from_ledger(ledger: PrivacyLedger, delta: float) -> tuple[float, int]:
    """Converts accumulated RDP to (epsilon, minimizing order).

    Identical steps are grouped so T equal steps cost one RDP evaluation.
    """
    if not 0.0 < delta < 1.0:
        raise DataError("delta must lie in (0, 1)")
    if not ledger.orders:
        raise DataError("empty order grid")
    if not ledger.records:
        return 0.0, min(ledger.orders)
    counts: dict[tuple[float, float], int] = {}
    for rec in ledger.records:
        counts[rec] = counts.get(rec, 0) + 1
    log_inv_delta = math.log(1.0 / delta)
    best_eps = math.inf
    best_order = min(ledger.orders)
    for alpha in ledger.orders:
        total = 0.0
        for (q, sigma), n in counts.items():
            total += n * rdp_subsampled_gaussian(q, sigma, alpha)
            if total == math.inf:
                break
        eps = total + log_inv_delta / (alpha - 1)
        if eps < best_eps:
            best_eps = eps
            best_order = alpha
    return best_eps, best_order


def spent_epsilon(q: float, sigma: float, steps: int, delta: float) -> float:
    """Epsilon after `steps` identical subsampled-Gaussian steps."""
    ledger = PrivacyLedger(records=[(q, sigma)] * steps)
    return ledger.epsilon(delta)[0]


def calibrate_sigma(
    target_epsilon: float, delta: float, q: float, total_steps: int
) -> float:
    """Smallest noise multiplier on the bisection bracket meeting the target.

    Bisects sigma on [0.01, 1e4] to relative tolerance 1e-4, returning the
    feasible endpoint: spent epsilon at the result is <= target, and shaving
    0.1% off the result overshoots it (for targets interior to the bracket).
    """
    if target_epsilon <= 0:
        raise CalibrationError("target epsilon must be positive")
    if total_steps < 1:
        raise CalibrationError("need at least one training step")
    lo, hi = SIGMA_BRACKET
    if spent_epsilon(q, hi, total_steps, delta) > target_epsilon:
        raise CalibrationError(
            f"target epsilon {target_epsilon} unreachable with sigma <= {hi:g} "
            f"at q={q:.6g}, steps={total_steps}"
        )
    if spent_epsilon(q, lo, total_steps, delta) <= target_epsilon:
        return lo
    # Invariant: eps(lo) > target >= eps(hi); epsilon is decreasing in sigma.
    while hi / lo - 1.0 > SIGMA_REL_TOL:
        mid = math.sqrt(lo * hi)
        if spent_epsilon(q, mid, total_steps, delta) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def private_training_step(
    params,
    batch_grads: list[GradientSet],
    cfg: DpConfig,
    opt_state: OptimizerState,
    ledger: PrivacyLedger,
    noise_rng: np.random.Generator | None,
    expected_batch: float,
    shapes: list[tuple[tuple[int, ...], tuple[int, ...]]] | None = None,
):
    """One DP-SGD update: clip -> noisy aggregate -> optimizer step -> ledger.

    `batch_grads` are per-example gradients for the (possibly empty) batch.
    Returns (params', opt_state').
    """
    sigma = cfg.noise_multiplier
    if sigma is None:
        raise DataError("DpConfig noise multiplier not resolved before training")
    clipped, _ = clip_per_sample(batch_grads, cfg.clip_norm)
    grad = noisy_aggregate(
        clipped, cfg.clip_norm, sigma, expected_batch, noise_rng, shapes=shapes
    )
    new_params, new_state = apply_step(params, grad, opt_state)
    ledger.record_step(cfg.sample_rate, sigma)
    return new_params, new_state
