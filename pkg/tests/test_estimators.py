import math

import numpy as np
import pytest

from testlab.core import EstimationFailure, MixtureSpec, Pmf, open_session
from testlab.estimators import (
    BandResult,
    CoinSource,
    ThresholdResult,
    additive_budget,
    band_budget,
    bias_band_test,
    bias_threshold_test,
    estimate_bias_additive,
    estimate_bias_first_success,
    estimate_bias_multiplicative,
    estimate_lambda_coarse,
    estimate_lambda_fine,
    multiplicative_budget,
    session_coin,
    threshold_budget,
)


def coin(rho, seed=0):
    return CoinSource.bernoulli(rho, np.random.default_rng(seed))


def session(lam, seed):
    return open_session(MixtureSpec(lam, Pmf.uniform(8), Pmf.uniform(8)), seed, "counts")


# ---------------------------------------------------------------- coins


def test_coin_counts_trials():
    c = coin(0.3)
    c.flip(10)
    c.trial()
    c.flip(0)
    assert c.trials_used == 11
    with pytest.raises(ValueError):
        c.flip(-1)
    with pytest.raises(ValueError):
        CoinSource.bernoulli(1.5, np.random.default_rng(0))


def test_session_coin_charges_sample_and_query():
    s = session(0.5, 0)
    c = session_coin(s)
    c.flip(25)
    assert s.samples_used == s.queries_used == c.trials_used == 25


# ---------------------------------------------------------------- additive


def test_additive_zero_coin():
    assert estimate_bias_additive(coin(0.0), 0.5, 0.1, 0.1) == 0.0


@pytest.mark.parametrize(
    "bound_q, eps, delta",
    [(0.2, 0.02, 0.05), (0.5, 0.1, 0.01), (0.01, 0.001, 0.3)],
)
def test_additive_budget_exact(bound_q, eps, delta):
    c = coin(0.1)
    estimate_bias_additive(c, bound_q, eps, delta, C_add=50.0)
    assert c.trials_used == math.ceil(50.0 * bound_q / eps**2 * math.log(1 / delta))
    assert c.trials_used == additive_budget(bound_q, eps, delta)


def test_additive_budget_scaling():
    # Halving eps multiplies the unrounded budget by exactly 4.
    a = 50.0 * 0.2 / 0.02**2 * math.log(20)
    assert additive_budget(0.2, 0.01, 0.05) == math.ceil(4 * a)


def test_additive_guarantee():
    rng = np.random.default_rng(1)
    inside = 0
    for _ in range(200):
        est = estimate_bias_additive(CoinSource.bernoulli(0.1, rng), 0.2, 0.02, 0.05)
        inside += abs(est - 0.1) <= 0.02
    assert inside >= 190


def test_additive_half_boundary():
    est = estimate_bias_additive(coin(0.5, 3), 0.5, 0.05, 0.01)
    assert abs(est - 0.5) < 0.05


def test_additive_rejects_bad_bound():
    with pytest.raises(ValueError):
        estimate_bias_additive(coin(0.1), 0.7, 0.1, 0.1)
    with pytest.raises(ValueError):
        estimate_bias_additive(coin(0.1), 0.5, 0.0, 0.1)


# ---------------------------------------------------------------- first success


def test_first_success_certain():
    assert estimate_bias_first_success(coin(1.0), 2.0, 10) == 1.0


def test_first_success_zero_fails():
    with pytest.raises(EstimationFailure):
        estimate_bias_first_success(coin(0.0), 200.0, 1000)


def test_first_success_guarantee():
    rng = np.random.default_rng(2)
    rho, C = 0.01, 200.0
    good = sum(
        rho / C <= estimate_bias_first_success(CoinSource.bernoulli(rho, rng), C, 100_000) <= C * rho
        for _ in range(1000)
    )
    assert good >= 990


def test_first_success_validates():
    with pytest.raises(ValueError):
        estimate_bias_first_success(coin(0.5), 0.5, 10)
    with pytest.raises(ValueError):
        estimate_bias_first_success(coin(0.5), 2.0, 0)


# ---------------------------------------------------------------- lambda


def test_coarse_lambda_one():
    for seed in range(20):
        assert 1 / 40000 < estimate_lambda_coarse(session(1.0, seed)) <= 1.0


def test_coarse_lambda_half():
    lam = 0.5
    hits, queries = 0, []
    for seed in range(1000):
        s = session(lam, seed)
        est = estimate_lambda_coarse(s)
        hits += lam / 40000 < est <= lam
        queries.append(s.queries_used)
    assert hits >= 980
    assert np.mean(queries) <= 400 / lam


def test_fine_lambda_one():
    eta = 0.2
    for seed in range(20):
        assert 1 - 2 * eta < estimate_lambda_fine(session(1.0, seed), eta) <= 1.0


def test_fine_lambda_guarantee():
    ok = sum(0.32 < estimate_lambda_fine(session(0.4, s), 0.1) <= 0.4 for s in range(500))
    assert ok >= 480


def test_fine_lambda_query_scaling():
    means = {}
    for eta in (0.05, 0.1, 0.2):
        q = []
        for seed in range(60):
            s = session(0.4, seed)
            estimate_lambda_fine(s, eta)
            q.append(s.queries_used)
        means[eta] = np.mean(q)
    for lo, hi in ((0.05, 0.1), (0.1, 0.2)):
        assert means[lo] / means[hi] == pytest.approx(4.0, rel=0.2)


def test_fine_lambda_bad_eta():
    with pytest.raises(ValueError):
        estimate_lambda_fine(session(0.5, 0), 0.5)


# ---------------------------------------------------------------- threshold and band


def test_threshold_zero():
    assert bias_threshold_test(coin(0.0), 0.1, 0.05) is ThresholdResult.BELOW_BETA_OVER_8


def test_threshold_budget_exact():
    c = coin(0.3)
    bias_threshold_test(c, 0.1, 0.05)
    assert c.trials_used == threshold_budget(0.1, 0.05) == math.ceil(8 * math.log(20) / 0.1)


def test_threshold_branches():
    rng = np.random.default_rng(4)
    beta, gamma = 0.1, 0.05
    hi = sum(bias_threshold_test(CoinSource.bernoulli(beta, rng), beta, gamma) is ThresholdResult.AT_LEAST_BETA
             for _ in range(400))
    lo = sum(bias_threshold_test(CoinSource.bernoulli(beta / 16, rng), beta, gamma)
             is ThresholdResult.BELOW_BETA_OVER_8 for _ in range(400))
    assert hi >= 380 and lo >= 380


def test_band_center_and_far():
    rng = np.random.default_rng(5)
    beta, delta, gamma = 0.2, 0.5, 0.05
    close = sum(bias_band_test(CoinSource.bernoulli(beta, rng), beta, delta, gamma) is BandResult.CLOSE
                for _ in range(400))
    far = sum(bias_band_test(CoinSource.bernoulli(2 * beta, rng), beta, delta, gamma) is BandResult.FAR
              for _ in range(400))
    assert close >= 380 and far >= 380


def test_band_middle_unconstrained():
    # Either answer is allowed between delta*beta/2 and delta*beta.
    res = bias_band_test(coin(0.2 * (1 + 0.75 * 0.5)), 0.2, 0.5, 0.05)
    assert res in (BandResult.CLOSE, BandResult.FAR)


def test_band_budget_exact():
    c = coin(0.2)
    bias_band_test(c, 0.2, 0.5, 0.05)
    assert c.trials_used == band_budget(0.2, 0.5, 0.05) == math.ceil(64 * math.log(20) / (0.2 * 0.25))


def test_multiplicative_relative_error():
    rng = np.random.default_rng(6)
    beta, delta, gamma = 0.05, 0.2, 0.05
    good = 0
    for _ in range(400):
        c = CoinSource.bernoulli(0.08, rng)
        est = estimate_bias_multiplicative(c, beta, delta, gamma)
        assert c.trials_used == multiplicative_budget(beta, delta, gamma)
        good += abs(est - 0.08) <= delta * 0.08
    assert good >= 380
