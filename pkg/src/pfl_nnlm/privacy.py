"""Clipping, the Gaussian mechanism and a Renyi-DP accountant for the
Poisson-subsampled Gaussian mechanism.

The accountant follows the usual RDP recipe: compute the per-round RDP of
the subsampled Gaussian at a grid of orders, multiply by the number of
rounds (composition), then convert to (epsilon, delta) by minimizing over
orders.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

DEFAULT_ORDERS: tuple[float, ...] = tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)

SIGMA_BRACKET = (0.3, 1e4)


class PrivacyError(ValueError):
    """Raised for invalid privacy parameters or unreachable targets."""


@dataclass
class PrivacyParams:
    epsilon: float = 2.0
    delta: float = 1e-6
    sampling_rate: float = 2e-3
    rounds: int = 1
    clip_radius: float = 0.3
    noise_sigma: float = 0.0
    rdp_orders: tuple[float, ...] = field(default=DEFAULT_ORDERS)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must be in (0, 1), got {self.delta}")
        if not 0 < self.sampling_rate <= 1:
            raise PrivacyError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if self.rounds < 1:
            raise PrivacyError(f"rounds must be >= 1, got {self.rounds}")
        if not self.clip_radius > 0:
            raise PrivacyError(f"clip_radius must be > 0, got {self.clip_radius}")
        if self.noise_sigma < 0:
            raise PrivacyError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if any(a <= 1 for a in self.rdp_orders):
            raise PrivacyError("all rdp_orders must be > 1")

    @property
    def privacy_off(self) -> bool:
        return self.noise_sigma == 0

    def check_population(self, population_size: int) -> None:
        """Warn if delta is not below 1/N."""
        if self.delta >= 1.0 / population_size:
            warnings.warn(
                f"delta={self.delta} is not below 1/population ({1.0 / population_size:.3g})",
                stacklevel=2,
            )


# ---------------------------------------------------------------------------
# Mechanism
# ---------------------------------------------------------------------------

def clip_l2(delta: np.ndarray, clip_radius: float) -> np.ndarray:
    """Scale ``delta`` so that its L2 norm is at most ``clip_radius``.

    Vectors already inside the ball are returned unchanged (as a copy).
    """
    if not clip_radius > 0:
        raise PrivacyError(f"clip radius must be > 0, got {clip_radius}")
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise PrivacyError("cannot clip a non-finite vector")
    scale = clip_factor(float(np.linalg.norm(delta)), clip_radius)
    if scale == 1.0:
        return delta.copy()
    return delta * scale


def clip_factor(norm: float, clip_radius: float) -> float:
    """Multiplier ``min(1, S / norm)``; exactly 1.0 inside the ball."""
    if norm <= clip_radius:
        return 1.0
    return clip_radius / norm


def gaussian_noise_sum(summed: np.ndarray, sigma: float, clip_radius: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, (sigma * clip_radius)^2) noise to a sum of clipped deltas."""
    if sigma < 0:
        raise PrivacyError(f"noise multiplier must be >= 0, got {sigma}")
    summed = np.asarray(summed, dtype=np.float64)
    if sigma == 0:
        return summed.copy()
    return summed + rng.normal(0.0, sigma * clip_radius, size=summed.shape)


# ---------------------------------------------------------------------------
# RDP of the subsampled Gaussian
# ---------------------------------------------------------------------------

def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    # log(exp(a) - exp(b)), requires a >= b
    if b == -math.inf:
        return a
    if a < b:
        raise ArithmeticError("log_sub of a larger value")
    if a == b:
        return -math.inf
    return a + math.log(-math.expm1(b - a))


def _log_comb(n: float, k: int) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    log_q, log_1q = math.log(q), math.log1p(-q)
    for i in range(alpha + 1):
        term = (_log_comb(alpha, i) + i * log_q + (alpha - i) * log_1q
                + (i * i - i) / (2.0 * sigma ** 2))
        log_a = _log_add(log_a, term)
    return log_a


def _log_erfc(x: float) -> float:
    return float(special.log_ndtr(-x * math.sqrt(2.0))) + math.log(2.0)


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Split the integral at the crossing point z0 of the two mixture densities
    # and expand both halves as (generalized) binomial series.
    log_pos0 = log_pos1 = -math.inf
    log_neg0 = log_neg1 = -math.inf
    z0 = sigma ** 2 * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1q = math.log(q), math.log1p(-q)
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * log_q + j * log_1q
        log_t1 = log_coef + j * log_q + i * log_1q
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma ** 2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma ** 2) + log_e1
        if coef > 0:
            log_pos0 = _log_add(log_pos0, log_s0)
            log_pos1 = _log_add(log_pos1, log_s1)
        else:
            log_neg0 = _log_add(log_neg0, log_s0)
            log_neg1 = _log_add(log_neg1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 and i > alpha:
            break
        if i > 10_000:
            raise ArithmeticError("fractional-order RDP series did not converge")
    return _log_add(_log_sub(log_pos0, log_neg0), _log_sub(log_pos1, log_neg1))


def rdp_subsampled_gaussian(q: float, sigma: float, order: float) -> float:
    """RDP of one round of the Poisson-subsampled Gaussian mechanism.

    Args:
        q: sampling rate in (0, 1].
        sigma: noise multiplier (std / sensitivity), > 0.
        order: Renyi order alpha > 1.

    Returns:
        The RDP bound at ``order``; ``alpha / (2 sigma^2)`` when ``q == 1``.
    """
    if not order > 1:
        raise PrivacyError(f"RDP order must be > 1, got {order}")
    if not sigma > 0:
        raise PrivacyError(f"sigma must be > 0, got {sigma}")
    if not 0 < q <= 1:
        raise PrivacyError(f"sampling rate must be in (0, 1], got {q}")
    if q == 1.0:
        return order / (2.0 * sigma ** 2)
    if math.isinf(order):
        return math.inf
    if float(order).is_integer():
        log_a = _log_a_int(q, sigma, int(order))
    else:
        log_a = _log_a_frac(q, sigma, float(order))
    return log_a / (order - 1)


def compute_rdp(q: float, sigma: float, rounds: int,
                orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    """Composed RDP of ``rounds`` subsampled-Gaussian rounds at each order."""
    if sigma == 0:
        return np.full(len(orders), math.inf)
    return np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders]) * rounds


def rdp_to_dp(rdp: Sequence[float], orders: Sequence[float], delta: float) -> tuple[float, float]:
    """Convert RDP values to (epsilon, best order) at a fixed delta."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders.size == 0:
        raise PrivacyError("need at least one RDP order")
    if orders.shape != rdp.shape:
        raise PrivacyError("rdp and orders must have the same length")
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must be in (0, 1), got {delta}")
    if np.any(np.isnan(rdp)):
        raise PrivacyError("rdp values must not be NaN")
    eps = rdp + math.log(1.0 / delta) / (orders - 1)
    best = int(np.argmin(eps))
    return float(eps[best]), float(orders[best])


def epsilon_for(sigma: float, delta: float, q: float, rounds: int,
                orders: Sequence[float] = DEFAULT_ORDERS) -> tuple[float, float]:
    return rdp_to_dp(compute_rdp(q, sigma, rounds, orders), orders, delta)


def calibrate_sigma(epsilon: float, delta: float, q: float, rounds: int,
                    orders: Sequence[float] = DEFAULT_ORDERS,
                    bracket: tuple[float, float] = SIGMA_BRACKET,
                    rtol: float = 1e-7) -> float:
    """Smallest noise multiplier whose composed privacy loss is at most ``epsilon``.

    Bisection on ``sigma``; the returned value always satisfies the target
    (the upper end of the final bracket is returned).
    """
    lo, hi = bracket
    eps_hi, _ = epsilon_for(hi, delta, q, rounds, orders)
    if eps_hi > epsilon:
        raise PrivacyError(
            f"target epsilon={epsilon} unreachable with sigma in [{lo}, {hi}] "
            f"(epsilon at sigma={hi} is {eps_hi:.4g})")
    eps_lo, _ = epsilon_for(lo, delta, q, rounds, orders)
    if eps_lo <= epsilon:
        return lo
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if epsilon_for(mid, delta, q, rounds, orders)[0] <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


class PrivacyLedger:
    """Tracks epsilon spent after each round at a fixed delta."""

    def __init__(self, q: float, sigma: float, delta: float,
                 orders: Sequence[float] = DEFAULT_ORDERS):
        self.delta = delta
        self.orders = tuple(orders)
        self._per_round = compute_rdp(q, sigma, 1, self.orders) if sigma > 0 else None
        self.history: list[float] = []

    def spend(self) -> float:
        t = len(self.history) + 1
        if self._per_round is None:
            eps = math.inf
        else:
            eps, _ = rdp_to_dp(self._per_round * t, self.orders, self.delta)
        self.history.append(eps)
        return eps
