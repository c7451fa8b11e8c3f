import itertools
import math

import numpy as np
import pytest

from testlab.collisions import (
    CollisionLedger,
    collision_queries,
    count_c_collisions,
    count_collisions,
    count_cross,
    estimate_p_collision_count,
    estimate_p_sample_count,
    p_sample_queries,
)
from testlab.core import GroundTruthProbe, MixtureSpec, Pmf, exact_pairs, open_session
from testlab.flatten import MappedSession, mixture_flatten


def brute_pairs(v):
    return sum(a == b for a, b in itertools.combinations(v, 2))


def test_distinct_log_has_no_collisions():
    assert count_collisions([0, 1, 2, 3]) == 0
    assert count_collisions([]) == 0


def test_triple():
    assert count_collisions([3, 3, 3]) == 3
    assert count_c_collisions([3, 3, 3], 3) == 1
    with pytest.raises(ValueError):
        count_c_collisions([1], 1)


def test_cross_is_ordered_product():
    # values 1 appear 2x and 3x: 6 ordered pairs; value 4 only on one side.
    assert count_cross([1, 1, 4], [1, 1, 1, 7]) == 6


@pytest.mark.parametrize("seed", range(5))
def test_pair_count_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 500))
    v = rng.integers(0, 30, size=m)
    assert count_collisions(v) == brute_pairs(v.tolist())
    w = rng.integers(0, 30, size=80)
    assert count_cross(v, w) == sum(a == b for a in v for b in w)


def test_collision_mean_uniform():
    n, m, T = 1000, 2000, 500
    s = open_session(MixtureSpec(1.0, Pmf.uniform(n), Pmf.uniform(n)), 0, "counts")
    counts = [s.draw(m).collision_count() for _ in range(T)]
    mu = math.comb(m, 2) / n
    assert abs(np.mean(counts) - mu) <= 3 * math.sqrt(mu * 1.2 / T)


def test_uniform_collision_selection():
    s = open_session(MixtureSpec(1.0, Pmf.point(4, 2), Pmf.uniform(4)), 0)
    st = s.draw(3)
    led = CollisionLedger(st)
    assert led.pair_count == 3
    rng = np.random.default_rng(0)
    K = 100_000
    freq = {}
    for _ in range(K):
        pair = tuple(sorted(led.uniform_collision(rng)))
        freq[pair] = freq.get(pair, 0) + 1
    assert len(freq) == 3
    sd = math.sqrt((1 / 3) * (2 / 3) / K)
    assert all(abs(c / K - 1 / 3) <= 3 * sd for c in freq.values())


def test_value_to_ids_requires_log():
    s = open_session(MixtureSpec(1.0, Pmf.uniform(4), Pmf.uniform(4)), 0, "counts")
    with pytest.raises(TypeError):
        CollisionLedger(s.draw(5)).value_to_ids()


def test_lambda_one_estimate_is_exact():
    s = open_session(MixtureSpec(1.0, Pmf.uniform(20), Pmf.uniform(20)), 1)
    st = s.draw(100)
    led = CollisionLedger(st)
    est = estimate_p_collision_count(led, 5.0, 0.1, np.random.default_rng(0))
    assert est == led.pair_count == exact_pairs(GroundTruthProbe.relevant_counts(st))


def test_empty_ledger_costs_nothing():
    s = open_session(MixtureSpec(0.5, Pmf.uniform(1000), Pmf.uniform(1000)), 1)
    st = s.draw(3)
    st = st.restrict(np.array([], dtype=np.int64)) if st.collision_count() else st
    led = CollisionLedger(st)
    assert led.pair_count == 0
    assert estimate_p_collision_count(led, 1.0, 0.1, np.random.default_rng(0)) == 0.0
    assert s.queries_used == 0
    assert collision_queries(0, 1.0, 0.1) == 0


def test_collision_query_budget_exact():
    s = open_session(MixtureSpec(0.5, Pmf.uniform(50), Pmf.uniform(50)), 2, "counts")
    st = s.draw(400)
    led = CollisionLedger(st)
    estimate_p_collision_count(led, 20.0, 0.05, np.random.default_rng(1), bound_q=0.3, C_add=12)
    assert s.queries_used == collision_queries(led.pair_count, 20.0, 0.05, 0.3, 12)


def test_collision_estimate_unbiased_on_fixed_log():
    s = open_session(MixtureSpec(0.5, Pmf.uniform(30), Pmf.uniform(30)), 3, "counts")
    st = s.draw(300)
    truth = exact_pairs(GroundTruthProbe.relevant_counts(st))
    led = CollisionLedger(st)
    rng = np.random.default_rng(9)
    ests = np.array([estimate_p_collision_count(led, 40.0, 0.2, rng) for _ in range(300)])
    assert abs(ests.mean() - truth) <= 3 * ests.std(ddof=1) / math.sqrt(ests.size)


def test_flattened_estimate_within_target():
    n, lam, eps = 200, 0.5, 0.3
    spec = MixtureSpec(lam, Pmf.uniform(n), Pmf(np.random.default_rng(0).dirichlet(np.ones(n))))
    good, reps = 0, 300
    for seed in range(reps):
        rng = np.random.default_rng(seed)
        base = open_session(spec, seed, "counts")
        F = mixture_flatten(base, n, rng, 0.1)
        s = MappedSession(base, F, rng)
        m = 400
        st = s.draw(int(m / lam))
        target = math.comb(m, 2) * eps**2 / 100
        est = estimate_p_collision_count(CollisionLedger(st), target, 0.01, rng, C_add=12)
        good += abs(est - exact_pairs(GroundTruthProbe.relevant_counts(st))) <= target
    assert good >= 0.97 * reps


def test_p_sample_count_lambda_one():
    s = open_session(MixtureSpec(1.0, Pmf.uniform(10), Pmf.uniform(10)), 0)
    st = s.draw(77)
    assert estimate_p_sample_count(st, 0.5, 1.0, np.random.default_rng(0)) == 77


def test_p_sample_count_budget():
    s = open_session(MixtureSpec(0.5, Pmf.uniform(40), Pmf.uniform(40)), 0, "counts")
    estimate_p_sample_count(s.draw(100), 0.3, 0.5, np.random.default_rng(0))
    assert s.queries_used == p_sample_queries(0.3, 0.5) == math.ceil(400 / (0.3**4 * 0.5**2))


def test_p_sample_count_guarantee():
    # The 0.01 constant needs relative error ~ 0.0025 eps^2, i.e. about 1e8
    # verifies at these parameters; C is sized from that variance.
    n, eps, lam = 400, 0.3, 0.5
    m = 200
    C = 4.0e5
    good = 0
    for seed in range(300):
        s = open_session(MixtureSpec(lam, Pmf.uniform(n), Pmf.uniform(n)), seed, "counts")
        st = s.draw(int(m / lam))
        mp = GroundTruthProbe.relevant_size(st)
        est = estimate_p_sample_count(st, eps, lam, np.random.default_rng(seed), C=C)
        assert s.queries_used == p_sample_queries(eps, lam, C)
        good += (2 / n) * abs(mp**2 - est**2) <= 0.01 * eps**2 * m**2 / n
    assert good >= 0.97 * 300
