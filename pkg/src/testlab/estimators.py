"""Bernoulli-bias and mixture-parameter estimation.

Every estimator consumes a :class:`CoinSource`, so the same code estimates
the relevance rate of fresh samples, of one bucket, or of random collisions.
Trial budgets are closed-form and charged exactly.
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Optional

import numpy as np

from .core import EstimationFailure, Session

__all__ = [
    "BandResult",
    "CoinSource",
    "ThresholdResult",
    "additive_budget",
    "band_budget",
    "bias_band_test",
    "bias_threshold_test",
    "estimate_bias_additive",
    "estimate_bias_first_success",
    "estimate_bias_multiplicative",
    "estimate_lambda_coarse",
    "estimate_lambda_fine",
    "multiplicative_budget",
    "session_coin",
    "threshold_budget",
]

C_ADD = 50.0
C_MULT = 50.0
C_THRESHOLD = 8.0
C_BAND = 64.0
C_FINE = 8.0
COARSE_C = 200.0
COARSE_CAP = 1_000_000


class ThresholdResult(str, enum.Enum):
    AT_LEAST_BETA = "AtLeastBeta"
    BELOW_BETA_OVER_8 = "BelowBetaOver8"


class BandResult(str, enum.Enum):
    CLOSE = "Close"
    FAR = "Far"


class CoinSource:
    """A source of i.i.d. Bernoulli trials.

    ``flip(k)`` must run ``k`` fresh trials and return the number of heads.
    Batching is only an efficiency device: estimators never request more
    trials than their stopping rule allows.
    """

    def __init__(self, flip: Callable[[int], int]):
        self._flip = flip
        self.trials_used = 0

    def flip(self, k: int) -> int:
        k = int(k)
        if k < 0:
            raise ValueError("k must be non-negative")
        if k == 0:
            return 0
        heads = int(self._flip(k))
        self.trials_used += k
        return heads

    def trial(self) -> bool:
        return self.flip(1) == 1

    @classmethod
    def bernoulli(cls, rho: float, rng: np.random.Generator) -> "CoinSource":
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        return cls(lambda k: int(rng.binomial(k, rho)))


def session_coin(session: Session) -> CoinSource:
    """Coin whose trial draws one fresh sample and verifies it."""

    def flip(k: int) -> int:
        return int(session.draw(k).verify_all().sum())

    return CoinSource(flip)


# --------------------------------------------------------------------------
# Budgets


def additive_budget(bound_q: float, eps: float, delta: float, C_add: float = C_ADD) -> int:
    """Trials used by :func:`estimate_bias_additive`."""
    return math.ceil(C_add * bound_q / eps**2 * math.log(1.0 / delta))


def multiplicative_budget(beta: float, delta: float, gamma: float, C: float = C_MULT) -> int:
    return math.ceil(C * math.log(1.0 / gamma) / (beta * delta**2))


def threshold_budget(beta: float, gamma: float, C: float = C_THRESHOLD) -> int:
    return math.ceil(C * math.log(1.0 / gamma) / beta)


def band_budget(beta: float, delta: float, gamma: float, C: float = C_BAND) -> int:
    return math.ceil(C * math.log(1.0 / gamma) / (beta * delta**2))


def _check_unit(name: str, x: float) -> None:
    if not 0.0 < x < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {x}")


# --------------------------------------------------------------------------
# Bias estimation


def estimate_bias_additive(
    coin: CoinSource, bound_q: float, eps: float, delta: float, C_add: float = C_ADD
) -> float:
    """Empirical mean over ``ceil(C_add * bound_q / eps^2 * ln(1/delta))`` trials.

    The caller promises ``rho < bound_q <= 1/2``; then the estimate is within
    ``eps`` of ``rho`` except with probability ``delta``.
    """
    if not 0.0 < bound_q <= 0.5:
        raise ValueError("bound_q must lie in (0, 1/2]")
    _check_unit("eps", eps)
    _check_unit("delta", delta)
    t = additive_budget(bound_q, eps, delta, C_add)
    return coin.flip(t) / t


def estimate_bias_first_success(coin: CoinSource, C: float, budget: int) -> float:
    """Return ``1 / position`` of the first head.

    With probability at least ``1 - 2/C`` the result lies in ``[rho/C, C*rho]``.
    Raises :class:`EstimationFailure` when ``budget`` trials pass without a head.
    """
    if C < 1:
        raise ValueError("C must be at least 1")
    if budget < 1:
        raise ValueError("budget must be positive")
    for i in range(1, int(budget) + 1):
        if coin.trial():
            return 1.0 / i
    raise EstimationFailure("no success within the trial budget")


def estimate_bias_multiplicative(
    coin: CoinSource, beta: float, delta: float, gamma: float, C: float = C_MULT
) -> float:
    """Relative-error estimate: ``|rho_hat - rho| <= delta * rho`` when ``rho >= beta``."""
    _check_unit("beta", beta)
    _check_unit("gamma", gamma)
    if delta <= 0:
        raise ValueError("delta must be positive")
    t = multiplicative_budget(beta, delta, gamma, C)
    return coin.flip(t) / t


def bias_threshold_test(
    coin: CoinSource, beta: float, gamma: float, C: float = C_THRESHOLD
) -> ThresholdResult:
    """Separate ``rho >= beta`` from ``rho < beta/8`` with ``O(ln(1/gamma)/beta)`` trials."""
    _check_unit("beta", beta)
    _check_unit("gamma", gamma)
    t = threshold_budget(beta, gamma, C)
    heads = coin.flip(t)
    if heads > beta * t / 2:
        return ThresholdResult.AT_LEAST_BETA
    return ThresholdResult.BELOW_BETA_OVER_8


def bias_band_test(
    coin: CoinSource, beta: float, delta: float, gamma: float, C: float = C_BAND
) -> BandResult:
    """Answer Close when ``|rho - beta| < delta*beta/2`` and Far when it exceeds ``delta*beta``.

    The estimate is compared with the midpoint ``0.75 * delta * beta`` of the
    unconstrained band.
    """
    _check_unit("beta", beta)
    _check_unit("gamma", gamma)
    if delta <= 0:
        raise ValueError("delta must be positive")
    t = band_budget(beta, delta, gamma, C)
    rho_hat = coin.flip(t) / t
    if abs(rho_hat - beta) <= 0.75 * delta * beta:
        return BandResult.CLOSE
    return BandResult.FAR


# --------------------------------------------------------------------------
# Mixture parameter


def estimate_lambda_coarse(
    session: Session, cap: int = COARSE_CAP, coin: Optional[CoinSource] = None
) -> float:
    """Constant-factor lower estimate of the relevance rate.

    First-success with ``C = 200`` on fresh verified samples, divided by 200,
    so that ``lam/40000 <= lam_hat <= lam`` with probability 0.99.
    """
    coin = coin or session_coin(session)
    return estimate_bias_first_success(coin, COARSE_C, cap) / COARSE_C


def fine_success_target(eta: float, C_fine: float = C_FINE) -> int:
    return math.ceil(C_fine / eta**2)


def estimate_lambda_fine(
    session: Session,
    eta: float,
    C_fine: float = C_FINE,
    coarse_cap: int = COARSE_CAP,
    coin: Optional[CoinSource] = None,
) -> float:
    """Lower estimate ``lam_hat`` in ``((1 - 2 eta) lam, lam]``.

    After a coarse pass, verify fresh samples until ``K = ceil(C_fine/eta^2)``
    of them are relevant (inverse binomial sampling).  With ``T`` the number
    of trials, ``K/T`` has relative error below ``eta`` with high probability,
    and ``(K/T)/(1+eta)`` is returned.  The trial cap is ``2K/lam0`` for the
    coarse estimate ``lam0``.
    """
    if not 0.0 < eta < 0.5:
        raise ValueError("eta must lie in (0, 1/2)")
    coin = coin or session_coin(session)
    lam0 = estimate_lambda_coarse(session, coarse_cap, coin)
    K = fine_success_target(eta, C_fine)
    cap = math.ceil(2 * K / lam0)
    have = 0
    trials = 0
    # A chunk of size K - have yields at most K - have heads, and it yields
    # exactly that many only if its last trial is a head, so the stopping
    # time is never overshot.
    while have < K:
        k = K - have
        if trials + k > cap:
            raise EstimationFailure("fine lambda estimation exceeded its trial cap")
        have += coin.flip(k)
        trials += k
    return min(1.0, (K / trials) / (1.0 + eta))
