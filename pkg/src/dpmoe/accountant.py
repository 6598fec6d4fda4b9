"""RDP accounting for the Poisson-subsampled Gaussian mechanism.

Integer orders use the binomial expansion of the privacy-loss moment;
fractional orders use the two-sided series of Mironov, Talwar and Zhang
(2019). Conversion to (epsilon, delta) uses the bound of Balle et al. (2020):

    eps = min_a  rdp(a) + log((a - 1) / a) - (log delta + log a) / (a - 1)

This over-approximates epsilon relative to numerical PRV accounting, so a
calibrated noise multiplier comes out slightly larger.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .errors import InvariantError, ParameterError, PrivacyInfeasibleError

DEFAULT_ORDERS = (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 257))
SIGMA_FLOOR = 0.3
SIGMA_CEIL = 100.0


@dataclass
class PrivacySpec:
    epsilon: float
    delta: float | None = None
    sample_rate: float = 1.0
    steps: int = 1
    sigma: float | None = None
    clip_norm: float = 1.0
    dataset_size: int | None = None

    def __post_init__(self):
        if self.delta is None:
            if not self.dataset_size:
                raise ParameterError("delta defaults to 1/dataset_size; give one of them")
            self.delta = 1.0 / self.dataset_size
        if self.epsilon <= 0:
            raise ParameterError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        if not 0 < self.sample_rate <= 1:
            raise ParameterError("sample_rate must lie in (0, 1]")
        if self.steps < 1:
            raise ParameterError("steps must be positive")
        if self.clip_norm <= 0:
            raise ParameterError("clip_norm must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ParameterError("sigma must be non-negative")

    def calibrated(self) -> "PrivacySpec":
        if self.sigma is not None:
            return self
        return replace(self, sigma=calibrate_sigma(self.epsilon, self.delta, self.sample_rate, self.steps))

    def expected_batch_size(self) -> float:
        if not self.dataset_size:
            raise ParameterError("expected batch size needs dataset_size")
        return self.sample_rate * self.dataset_size


@dataclass
class RdpCurve:
    orders: np.ndarray
    rdp: np.ndarray
    notes: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.orders)

    def scaled(self, steps: int) -> "RdpCurve":
        """Composition of ``steps`` identical invocations."""
        return RdpCurve(self.orders.copy(), self.rdp * steps, list(self.notes))


def _log_add(a, b):
    return np.logaddexp(a, b)


def _log_sub(a, b):
    if b > a:
        raise FloatingPointError("log-space subtraction went negative")
    if b == -np.inf:
        return a
    if a == b:
        return -np.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x):
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q, sigma, alpha: int):
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q, sigma, alpha: float, max_terms: int = 100_000):
    log_a0 = log_a1 = -np.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    for i in range(max_terms):
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        if max(log_s0, log_s1) < -30:
            return float(_log_add(log_a0, log_a1))
    raise FloatingPointError("fractional-order series did not converge")


def rdp_subsampled_gaussian(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """RDP of one Poisson-subsampled Gaussian step at each order.

    Orders where the evaluation is not finite or not representable are left
    out of the curve and listed in ``notes``.
    """
    if not 0 < q <= 1:
        raise ParameterError(f"sampling rate must lie in (0, 1], got {q}")
    if sigma <= 0:
        raise ParameterError(f"noise multiplier must be positive, got {sigma}")
    kept_a, kept_r, notes = [], [], []
    for a in orders:
        a = float(a)
        if a <= 1:
            raise ParameterError(f"RDP orders must exceed 1, got {a}")
        try:
            if q == 1.0:
                r = a / (2 * sigma**2)
            elif a.is_integer():
                r = _log_a_int(q, sigma, int(a)) / (a - 1)
            else:
                r = _log_a_frac(q, sigma, a) / (a - 1)
        except (FloatingPointError, OverflowError, ValueError) as exc:
            notes.append(f"order {a:g} excluded: {exc}")
            continue
        if not math.isfinite(r):
            notes.append(f"order {a:g} excluded: non-finite value")
            continue
        if r < 0:
            if r > -1e-12:
                notes.append(f"order {a:g}: rounding residue {r:.3e} set to 0")
                r = 0.0
            else:
                notes.append(f"order {a:g} excluded: negative value {r:.3e}")
                continue
        kept_a.append(a)
        kept_r.append(r)
    return RdpCurve(np.array(kept_a), np.array(kept_r), notes)


def conversion_terms(orders, delta: float) -> np.ndarray:
    """The delta-dependent part of the RDP -> (eps, delta) bound, per order."""
    a = np.asarray(orders, dtype=np.float64)
    return np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)


def rdp_to_dp(curve: RdpCurve, delta: float):
    """Return ``(epsilon, best_order)``; epsilon is floored at 0.

    For ``delta >= 1`` the guarantee is vacuous and epsilon is 0.
    """
    if len(curve) == 0:
        raise ParameterError("cannot convert an empty RDP curve")
    if delta <= 0:
        raise ParameterError("delta must be positive")
    if delta >= 1:
        return 0.0, float(curve.orders[0])
    eps = curve.rdp + conversion_terms(curve.orders, delta)
    i = int(np.argmin(eps))
    return max(float(eps[i]), 0.0), float(curve.orders[i])


def epsilon_for(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS):
    if sigma == 0:
        return math.inf, None
    return rdp_to_dp(rdp_subsampled_gaussian(q, sigma, orders).scaled(steps), delta)


def calibrate_sigma(epsilon: float, delta: float, q: float, steps: int, lo: float = SIGMA_FLOOR,
                    hi: float = SIGMA_CEIL, tol: float = 1e-3, orders=DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier on a bisection grid over [lo, hi] meeting epsilon.

    Returns the upper end of the final bracket (width <= ``tol``), which always
    satisfies the target.
    """

    def eps(s):
        return epsilon_for(q, s, steps, delta, orders)[0]

    e_lo, e_hi = eps(lo), eps(hi)
    if e_lo <= epsilon:
        return lo
    if e_hi > epsilon:
        raise PrivacyInfeasibleError(
            f"epsilon={epsilon} unreachable for sigma in [{lo}, {hi}]; achievable epsilon range is "
            f"[{e_hi:.6g}, {e_lo:.6g}]", achievable=(e_hi, e_lo))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        e_mid = eps(mid)
        if not (e_hi - 1e-12 <= e_mid <= e_lo + 1e-12):
            raise InvariantError(f"epsilon is not monotone in sigma near {mid}")
        if e_mid <= epsilon:
            hi, e_hi = mid, e_mid
        else:
            lo, e_lo = mid, e_mid
    return hi


def report(epsilon=None, delta=None, q=None, steps=None, sigma=None) -> dict:
    """Accountant summary: calibrate when ``sigma`` is None, else evaluate."""
    if sigma is None:
        if epsilon is None:
            raise ParameterError("need epsilon to calibrate or sigma to evaluate")
        sigma = calibrate_sigma(epsilon, delta, q, steps)
    eps, order = epsilon_for(q, sigma, steps, delta)
    return {"sigma": sigma, "epsilon": eps, "best_order": order, "delta": delta, "q": q, "steps": steps}
