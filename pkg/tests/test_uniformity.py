import math

import numpy as np
import pytest
from scipy import stats

from testlab.config import TesterConfig
from testlab.core import AdversarialSpec, MixtureSpec, Pmf, Verdict, open_session, tvd
from testlab.instances import gen_masked_far, gen_paninski
from testlab.uniformity import (
    adversarial_query_ceiling,
    amplify,
    far_index_check,
    level_sets,
    qopt_query_ceiling,
    test_identity,
    test_uniformity,
    test_uniformity_adversarial,
    test_uniformity_bounded_norm,
    test_uniformity_mixture_knowledge,
    test_uniformity_query_optimal,
    uniformity_query_ceiling,
)


def rate(verdicts, which):
    return sum(v is which for v in verdicts) / len(verdicts)


def heavy(n, top=0.5):
    x = np.full(n, (1 - top) / (n - 1))
    x[0] = top
    return Pmf(x)


# ---------------------------------------------------------------- bounded norm


def test_bounded_norm_uniform_clean():
    n, eps = 200, 0.4
    spec = MixtureSpec(1.0, Pmf.uniform(n), Pmf.uniform(n))
    cfg = TesterConfig(eps=eps)
    vs = [test_uniformity_bounded_norm(open_session(spec, s, "counts"), n, eps, 1 / n, config=cfg) for s in range(100)]
    assert rate(vs, Verdict.ACCEPT) >= 0.9


def test_bounded_norm_single_element():
    s = open_session(MixtureSpec(0.3, Pmf.uniform(1), Pmf.uniform(1)), 0, "counts")
    assert test_uniformity_bounded_norm(s, 1, 0.3, 1.0) is Verdict.ACCEPT
    assert s.queries_used == 0


def test_bounded_norm_domain_mismatch():
    s = open_session(MixtureSpec(1.0, Pmf.uniform(4), Pmf.uniform(4)), 0, "counts")
    with pytest.raises(ValueError):
        test_uniformity_bounded_norm(s, 5, 0.3, 0.25)


def test_flattened_paninski_rejected():
    n, eps, lam = 200, 0.4, 0.5
    spec = MixtureSpec(lam, gen_paninski(n, eps), Pmf.uniform(n))
    cfg = TesterConfig(eps=eps)
    vs = [test_uniformity(open_session(spec, s, "counts"), n, eps, n, config=cfg) for s in range(200)]
    assert rate(vs, Verdict.REJECT) >= 0.9


def test_failure_recorded_in_trace():
    # A known lambda far above the truth starves the p-sample estimate but
    # must never crash; whatever happens is a verdict.
    spec = MixtureSpec(0.5, Pmf.uniform(50), Pmf.uniform(50))
    tr = {}
    v = test_uniformity(open_session(spec, 0, "counts"), 50, 0.4, 50, config=TesterConfig(eps=0.4, lam_known=1.0), trace=tr)
    assert isinstance(v, Verdict)
    assert {"lam_hat", "m", "M", "flat_n", "reduced_n", "b"} <= set(tr)


# ---------------------------------------------------------------- sublinear uniformity and identity


def test_uniformity_accepts_uniform_with_noise():
    n, eps, lam = 1000, 0.4, 0.5
    rng = np.random.default_rng(0)
    spec = MixtureSpec(lam, Pmf.uniform(n), Pmf(rng.dirichlet(np.ones(n))))
    cfg = TesterConfig(eps=eps)
    ceiling = uniformity_query_ceiling(n, n, eps, lam, cfg)
    vs = []
    for s in range(100):
        sess = open_session(spec, s, "counts")
        vs.append(test_uniformity(sess, n, eps, n, config=cfg))
        assert sess.queries_used <= ceiling
    assert rate(vs, Verdict.ACCEPT) >= 2 / 3


def test_uniformity_masked_far_rejected():
    n, eps, lam = 1000, 0.4, 0.5
    spec = gen_masked_far(n, eps, lam)
    np.testing.assert_allclose(spec.mixture.mass, 1 / n, atol=1e-15)
    cfg = TesterConfig(eps=eps)
    vs = [test_uniformity(open_session(spec, s, "counts"), n, eps, n, config=cfg) for s in range(100)]
    assert rate(vs, Verdict.REJECT) >= 2 / 3


def test_uniformity_validates_m():
    s = open_session(MixtureSpec(1.0, Pmf.uniform(4), Pmf.uniform(4)), 0, "counts")
    with pytest.raises(ValueError):
        test_uniformity(s, 4, 0.3, 0)


def test_identity_equality_case():
    n, eps = 100, 0.4
    D = Pmf(np.random.default_rng(1).dirichlet(np.ones(n)))
    spec = MixtureSpec(1.0, D, Pmf.uniform(n))
    cfg = TesterConfig(eps=eps)
    vs = [test_identity(open_session(spec, s, "counts"), D, eps, n, config=cfg) for s in range(60)]
    assert rate(vs, Verdict.ACCEPT) >= 2 / 3


def test_identity_uniform_target_matches_uniformity():
    n, eps = 100, 0.4
    spec = MixtureSpec(0.5, gen_paninski(n, eps), Pmf.uniform(n))
    cfg = TesterConfig(eps=eps)
    for seed in range(10):
        a = test_identity(open_session(spec, seed, "counts"), Pmf.uniform(n), eps, n, config=cfg,
                          rng=np.random.default_rng(seed))
        b = test_uniformity(open_session(spec, seed, "counts"), n, eps, n, config=cfg,
                            rng=np.random.default_rng(seed))
        assert a is b


def test_identity_far_target_rejected():
    n, eps, lam = 100, 0.4, 0.5
    rng = np.random.default_rng(2)
    D = Pmf(rng.dirichlet(np.ones(n)))
    # Move 0.4 of mass between two halves by cross-mixing with a point mass.
    p = Pmf(0.6 * D.mass + 0.4 * Pmf.point(n, int(np.argmin(D.mass))).mass)
    assert tvd(p, D) == pytest.approx(0.4 * (1 - D.mass.min()))
    spec = MixtureSpec(lam, p, Pmf.uniform(n))
    cfg = TesterConfig(eps=eps * 0.9)
    vs = [test_identity(open_session(spec, s, "counts"), D, 0.9 * eps, n, config=cfg) for s in range(100)]
    assert rate(vs, Verdict.REJECT) >= 2 / 3


def test_identity_domain_mismatch():
    s = open_session(MixtureSpec(1.0, Pmf.uniform(4), Pmf.uniform(4)), 0, "counts")
    with pytest.raises(ValueError):
        test_identity(s, Pmf.uniform(5), 0.3, 4)


# ---------------------------------------------------------------- adversarial


@pytest.mark.parametrize("adversary", ["honest", "point-mass"])
def test_adversarial_accepts_uniform(adversary):
    n, eps, lam = 1000, 0.4, 0.5
    cfg = TesterConfig(eps=eps)
    vs = []
    for s in range(40):
        sess = open_session(AdversarialSpec(lam, Pmf.uniform(n), adversary), s)
        tr = {}
        vs.append(test_uniformity_adversarial(sess, n, eps, config=cfg, trace=tr))
        assert sess.queries_used <= adversarial_query_ceiling(n, sess.samples_used, eps, lam, cfg)
    assert rate(vs, Verdict.ACCEPT) >= 2 / 3


def test_adversarial_block_mimic_rejects_far():
    n, eps, lam = 1000, 0.4, 0.5
    cfg = TesterConfig(eps=eps)
    vs = [
        test_uniformity_adversarial(open_session(AdversarialSpec(lam, gen_paninski(n, eps), "10m-block"), s), n, eps, config=cfg)
        for s in range(40)
    ]
    assert rate(vs, Verdict.REJECT) >= 2 / 3


# ---------------------------------------------------------------- query optimal


def test_qopt_uniform_clean():
    n, eps = 200, 0.3
    cfg = TesterConfig(eps=eps)
    spec = MixtureSpec(1.0, Pmf.uniform(n), Pmf.uniform(n))
    vs = []
    for s in range(30):
        tr = {}
        vs.append(test_uniformity_query_optimal(open_session(spec, s, "counts"), n, eps, config=cfg, trace=tr))
        # every sample is relevant, so every estimated bucket rate is 1
        assert all(v == pytest.approx(1.0, abs=0.02) for v in tr["partition"].rho.values())
    assert rate(vs, Verdict.ACCEPT) >= 2 / 3


def qopt_phases(spec, n, eps, reps=30):
    cfg = TesterConfig(eps=eps)
    vs, phases = [], []
    for s in range(reps):
        tr = {}
        v = test_uniformity_query_optimal(open_session(spec, s, "counts"), n, eps, config=cfg, trace=tr)
        vs.append(v)
        if v is Verdict.REJECT:
            phases.append(tr["partition"].rejected_by[0])
    return vs, phases


def test_qopt_heavy_element_phase1():
    n = 100
    vs, phases = qopt_phases(MixtureSpec(0.5, heavy(n), Pmf.uniform(n)), n, 0.3)
    assert rate(vs, Verdict.REJECT) >= 2 / 3
    assert phases.count("phase1") >= len(phases) / 2


def test_qopt_paninski_rejected():
    # At eps = 0.3 the heavy half has ratio 1 + 2 eps > 3/2, so phase 1 fires first.
    n, eps = 500, 0.3
    vs, phases = qopt_phases(MixtureSpec(0.5, gen_paninski(n, eps), Pmf.uniform(n)), n, eps)
    assert rate(vs, Verdict.REJECT) >= 2 / 3
    assert set(phases) <= {"phase1", "phase2"}


@pytest.mark.parametrize("masked", [False, True])
def test_qopt_paninski_phase2(masked):
    n, eps, lam = 500, 0.2, 0.5
    spec = gen_masked_far(n, eps, lam) if masked else MixtureSpec(lam, gen_paninski(n, eps), Pmf.uniform(n))
    vs, phases = qopt_phases(spec, n, eps)
    assert rate(vs, Verdict.REJECT) >= 2 / 3
    assert phases.count("phase2") >= len(phases) / 2


def test_qopt_ceiling_independent_of_n():
    cfg = TesterConfig(eps=0.3)
    a = qopt_query_ceiling(100, 0.3, 0.5, cfg)
    b = qopt_query_ceiling(100_000, 0.3, 0.5, cfg)
    assert a == pytest.approx(b, rel=1e-9)


# ---------------------------------------------------------------- mixture knowledge


def test_level_sets_uniform_single_level():
    lv = level_sets(Pmf.uniform(64))
    assert len(np.unique(lv)) == 1


def test_level_sets_dyadic():
    r = Pmf(np.array([0.5, 0.25, 0.125, 0.125]))
    # 2^-k < r_i <= 2^(-k+1): 0.5 -> k=2, 0.25 -> k=3; the rest are <= 1/n
    assert level_sets(r).tolist()[:2] == [2, 3]


def test_far_index_on_far_instances():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(8, 300))
        eps = float(rng.uniform(0.05, 0.45))
        p = gen_paninski(n - n % 2, eps)
        r = Pmf(0.5 * p.mass + 0.5 * rng.dirichlet(np.ones(p.n)))
        assert tvd(p, Pmf.uniform(p.n)) >= eps - 1e-12
        assert far_index_check(p, r, eps)["holds"]


def test_mixknow_uniform():
    n, eps = 256, 0.3
    spec = MixtureSpec(0.5, Pmf.uniform(n), Pmf.uniform(n))
    cfg = TesterConfig(eps=eps)
    vs = [test_uniformity_mixture_knowledge(spec.mixture, open_session(spec, s, "counts"), n, eps, config=cfg)
          for s in range(20)]
    assert rate(vs, Verdict.ACCEPT) >= 2 / 3


def test_mixknow_domain_check():
    spec = MixtureSpec(0.5, Pmf.uniform(8), Pmf.uniform(8))
    with pytest.raises(ValueError):
        test_uniformity_mixture_knowledge(Pmf.uniform(4), open_session(spec, 0, "counts"), 8, 0.3)


# ---------------------------------------------------------------- invariants


def test_amplification_reduces_error():
    rng = np.random.default_rng(4)
    p_err = 0.3

    def noisy():
        return Verdict.REJECT if rng.random() < p_err else Verdict.ACCEPT

    reps = 4000
    single = sum(noisy() is Verdict.REJECT for _ in range(reps)) / reps
    amplified = sum(amplify(noisy, 15) is Verdict.REJECT for _ in range(reps)) / reps
    assert single == pytest.approx(p_err, abs=0.03)
    assert amplified <= math.exp(-15 / 18) * single
    assert amplified == pytest.approx(stats.binom.sf(7, 15, p_err), abs=0.01)


def test_amplify_fail_majority():
    it = iter([Verdict.FAIL, Verdict.FAIL, Verdict.ACCEPT])
    assert amplify(lambda: next(it), 3) is Verdict.FAIL
    it = iter([Verdict.ACCEPT, Verdict.REJECT, Verdict.FAIL])
    assert amplify(lambda: next(it), 3) is Verdict.ACCEPT


def test_rejection_monotone_in_eps():
    n, lam = 200, 0.5
    spec = MixtureSpec(lam, gen_paninski(n, 0.4), Pmf.uniform(n))
    reps = 80
    rates = {}
    for eps in (0.4, 0.3):
        cfg = TesterConfig(eps=eps)
        rates[eps] = sum(
            test_uniformity(open_session(spec, s, "counts"), n, eps, n, config=cfg) is Verdict.REJECT for s in range(reps)
        )
    # H1: rate at the smaller eps is lower.  One-sided Fisher test at 1e-3.
    table = [[rates[0.3], reps - rates[0.3]], [rates[0.4], reps - rates[0.4]]]
    assert stats.fisher_exact(table, alternative="less").pvalue > 1e-3


def test_uniformity_ceiling_scaling():
    cfg = TesterConfig(eps=0.4)
    lo = uniformity_query_ceiling(10_000, 100, 0.4, 0.5, cfg)
    hi = uniformity_query_ceiling(10_000, 1000, 0.4, 0.5, cfg)
    assert hi < lo
