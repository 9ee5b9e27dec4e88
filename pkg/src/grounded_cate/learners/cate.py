"""Base CATE estimators: difference of per-arm regressions, and pseudo-outcome regression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from ..data import Dataset
from ..errors import DataError, EmptyArmError
from ..parallel import derive_seed
from .forest import ForestModel, ForestParams, forest_fit
from .ridge import DEFAULT_FOLDS, DEFAULT_LAMBDAS, LinearModel, ridge_cv_fit

DIFFERENCE = "difference_of_regressions"
PSEUDO_OUTCOME = "pseudo_outcome_regression"
KINDS = (DIFFERENCE, PSEUDO_OUTCOME)
BASES = ("ridge_cv", "forest")


@runtime_checkable
class CateModel(Protocol):
    def predict_effect(self, X) -> np.ndarray: ...


@dataclass(frozen=True)
class RidgeParams:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    folds: int = DEFAULT_FOLDS

    def to_dict(self) -> dict:
        return {"lambdas": list(self.lambdas), "folds": self.folds}


@dataclass(frozen=True)
class CateEstimatorSpec:
    kind: str = DIFFERENCE
    base: str = "ridge_cv"
    forest: ForestParams = field(default_factory=ForestParams)
    ridge: RidgeParams = field(default_factory=RidgeParams)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        if self.base not in BASES:
            raise ValueError(f"unknown base regressor {self.base!r}; expected one of {BASES}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "base": self.base}
        out["params"] = self.forest.to_dict() if self.base == "forest" else self.ridge.to_dict()
        return out


def fit_regressor(spec: CateEstimatorSpec, X, y, seed: int, threads: int | None = None):
    if spec.base == "forest":
        return forest_fit(X, y, spec.forest, seed=seed, threads=threads)
    return ridge_cv_fit(X, y, spec.ridge.lambdas, spec.ridge.folds, seed=seed)


@dataclass(frozen=True, eq=False)
class DifferenceModel:
    """Effect = treated-arm regression minus control-arm regression."""

    treated: LinearModel | ForestModel
    control: LinearModel | ForestModel

    def predict_effect(self, X) -> np.ndarray:
        return self.treated.predict(X) - self.control.predict(X)


@dataclass(frozen=True, eq=False)
class PseudoOutcomeModel:
    """Effect = regression of the signed-reweighted outcome on covariates."""

    regressor: LinearModel | ForestModel

    def predict_effect(self, X) -> np.ndarray:
        return self.regressor.predict(X)


def fit_cate(
    ds: Dataset,
    spec: CateEstimatorSpec,
    seed: int = 0,
    allow_constant_propensity: bool = True,
    overlap_margin: float = 0.01,
    threads: int | None = None,
):
    """Fit a base CATE estimator on one sample.

    ``difference_of_regressions`` fits the chosen regressor separately on
    each arm. ``pseudo_outcome_regression`` regresses the signed-reweighted
    outcome directly; it needs a propensity column, or falls back to the
    treated fraction when ``allow_constant_propensity`` is set.
    """
    if spec.kind == DIFFERENCE:
        treated = ds.treatment == 1
        n1 = int(treated.sum())
        if n1 == 0 or n1 == ds.n:
            raise EmptyArmError(
                f"difference of regressions needs both arms; got {n1} treated of {ds.n}"
            )
        f1 = fit_regressor(spec, ds.features[treated], ds.outcome[treated], derive_seed(seed, 1), threads)
        f0 = fit_regressor(spec, ds.features[~treated], ds.outcome[~treated], derive_seed(seed, 0), threads)
        return DifferenceModel(f1, f0)

    # deferred: grounding depends on learners for the corrected model
    from ..grounding import pseudo_outcomes

    if ds.propensity is None and not allow_constant_propensity:
        raise DataError("pseudo-outcome regression needs a propensity column")
    z = pseudo_outcomes(ds, margin=overlap_margin, allow_constant=allow_constant_propensity)
    return PseudoOutcomeModel(fit_regressor(spec, ds.features, z, derive_seed(seed, 2), threads))
