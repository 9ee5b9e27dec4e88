"""CATE estimation that corrects an observational estimate with a small experiment.

A base estimator fitted on confounded data is shifted by a parametric
correction ``theta' phi(x)`` that is fitted, by least squares on signed
inverse-propensity pseudo-outcomes, on an unconfounded sample.
"""

from .data import ColumnSchema, Dataset, load_csv, split, validate_pair, write_csv
from .errors import (
    AlgorithmStepError,
    ArtifactError,
    DataError,
    EmptyArmError,
    GroundedCateError,
    IdentifiabilityError,
    OverlapError,
    SchemaMismatchError,
    SingularDesignError,
    SplitError,
)
from .evaluation import evaluate_model, rmse, run_baselines, sweep_q_prime, sweep_rate
from .grounding import (
    CorrectedCateModel,
    Correction,
    EtaFeatureMap,
    fit_correction,
    pseudo_outcomes,
    remove_hidden_confounding,
    signed_weight,
)
from .learners import CateEstimatorSpec, ForestParams, RidgeParams, fit_cate
from .semisynth import InjectionSpec, ground_truth_outcomes, inject_confounding
from .simgen import SimConfig, gen_confounded, gen_unconfounded, mc_true_omega, true_tau

__version__ = "0.1.0"
