"""Simulation laboratory for distribution testing with verification queries."""

from .closeness import (
    reduce_unequal_mixtures,
    test_closeness,
    test_closeness_l2,
    test_closeness_query_optimal,
)
from .config import TesterConfig
from .core import (
    AdversarialSpec,
    EstimationFailure,
    GroundTruth,
    Label,
    MixtureSpec,
    Pmf,
    Semantics,
    TrialRecord,
    Verdict,
    draw_sample,
    l2_norm_sq,
    make_rng,
    open_session,
    tvd,
    verify_sample,
)
from .harness import ExperimentConfig, SweepReport, fit_tradeoff_slope, run_trial, sweep
from .instances import build_instance, gen_closeness_hard, gen_masked_far, gen_paninski, gen_uniformity_hard
from .uniformity import (
    test_identity,
    test_uniformity,
    test_uniformity_adversarial,
    test_uniformity_mixture_knowledge,
    test_uniformity_query_optimal,
)

__test__ = False
__version__ = "0.1.0"
