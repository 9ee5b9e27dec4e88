"""Two-stage CATE estimation with a learned hidden-confounding correction.

Stage one fits any base CATE estimator on the large confounded sample; its
target is the observational contrast ``omega(x)``, not the causal effect.
Stage two uses the small unconfounded sample, where the signed-reweighted
outcome ``q * Y`` is unbiased for the effect, to fit a parametric correction
``eta(x) = theta' phi(x)`` by least squares on ``q * Y - omega_hat(X)``.
The returned estimate is ``omega_hat(x) + theta' phi(x)``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset, PairDiagnostics, validate_pair
from .errors import (
    AlgorithmStepError,
    ArtifactError,
    DataError,
    GroundedCateError,
    IdentifiabilityError,
    OverlapError,
)
from .learners.cate import CateEstimatorSpec, DifferenceModel, PseudoOutcomeModel, fit_cate
from .learners.forest import ForestModel
from .learners.ridge import CONDITION_LIMIT, LinearModel

DEFAULT_MARGIN = 0.01


class ConstantPropensityWarning(UserWarning):
    """The experimental sample had no propensity column; the treated fraction was used."""


def signed_weight(t: int, e: float, margin: float = DEFAULT_MARGIN) -> float:
    """``t / e - (1 - t) / (1 - e)``: ``1/e`` for treated, ``-1/(1-e)`` for control."""
    if not margin <= e <= 1.0 - margin:
        raise OverlapError(f"propensity {e!r} outside [{margin}, {1.0 - margin}]")
    if t == 1:
        return 1.0 / e
    if t == 0:
        return -1.0 / (1.0 - e)
    raise ValueError(f"treatment must be 0 or 1, got {t!r}")


def _propensity(ds: Dataset, allow_constant: bool) -> np.ndarray:
    if ds.propensity is not None:
        return ds.propensity
    if not allow_constant:
        raise DataError("experimental sample has no propensity column and constant fallback is off")
    q = float(ds.treatment.mean())
    warnings.warn(
        f"no propensity column; using the constant treated fraction {q:.6g}",
        ConstantPropensityWarning,
        stacklevel=3,
    )
    if not 0.0 < q < 1.0:
        raise OverlapError(f"treated fraction {q} leaves an arm empty")
    return np.full(ds.n, q)


def check_overlap(e: np.ndarray, margin: float = DEFAULT_MARGIN) -> None:
    bad = np.flatnonzero((e < margin) | (e > 1.0 - margin))
    if bad.size:
        row = int(bad[0])
        raise OverlapError(
            f"row {row}: propensity {e[row]!r} outside [{margin}, {1.0 - margin}] "
            f"({bad.size} row(s) violate overlap)",
            row=row,
        )


def pseudo_outcomes(ds: Dataset, margin: float = DEFAULT_MARGIN, allow_constant: bool = True) -> np.ndarray:
    """Signed-reweighted outcomes ``q_i * Y_i``, unbiased for the CATE on unconfounded data.

    Computed as ``Y / e`` or ``-Y / (1 - e)`` directly (no reciprocal first),
    so under a constant propensity ``q`` the result is bitwise equal to
    ``Y / (q + T - 1)``.
    """
    e = _propensity(ds, allow_constant)
    check_overlap(e, margin)
    y = ds.outcome
    return np.where(ds.treatment == 1, y / e, -(y / (1.0 - e)))


_KINDS = ("identity", "identity_plus_intercept", "polynomial")


@dataclass(frozen=True)
class EtaFeatureMap:
    """Feature map for the parametric correction; ``theta = 0`` always means no correction.

    ``polynomial`` includes the constant and every monomial up to ``degree``;
    degree 0 gives a constant-only correction.
    """

    kind: str = "identity_plus_intercept"
    degree: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown feature map {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "polynomial":
            if self.degree is None or self.degree < 0:
                raise ValueError("polynomial feature map needs degree >= 0")
        elif self.degree is not None:
            raise ValueError(f"{self.kind} map takes no degree")

    @classmethod
    def parse(cls, text: str) -> "EtaFeatureMap":
        """Parse the CLI spelling: ``identity``, ``identity+intercept`` or ``poly:k``."""
        text = text.strip()
        if text == "identity":
            return cls("identity")
        if text in ("identity+intercept", "identity_plus_intercept"):
            return cls("identity_plus_intercept")
        if text.startswith("poly:"):
            try:
                return cls("polynomial", int(text[5:]))
            except ValueError:
                pass
        raise ValueError(f"cannot parse feature map {text!r}")

    @property
    def label(self) -> str:
        if self.kind == "polynomial":
            return f"poly:{self.degree}"
        return "identity" if self.kind == "identity" else "identity+intercept"

    def _monomials(self, d: int) -> list[tuple[int, ...]]:
        if self.kind == "identity":
            return [(j,) for j in range(d)]
        if self.kind == "identity_plus_intercept":
            return [()] + [(j,) for j in range(d)]
        terms = [()]
        for k in range(1, self.degree + 1):
            terms.extend(itertools.combinations_with_replacement(range(d), k))
        return terms

    def n_params(self, d: int) -> int:
        return len(self._monomials(d))

    def names(self, feature_names) -> list[str]:
        out = []
        for term in self._monomials(len(feature_names)):
            out.append("1" if not term else "*".join(feature_names[j] for j in term))
        return out

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if self.kind == "identity":
            return X.copy()
        cols = []
        for term in self._monomials(X.shape[1]):
            col = np.ones(X.shape[0])
            for j in term:
                col = col * X[:, j]
            cols.append(col)
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "degree": self.degree}

    @classmethod
    def from_dict(cls, d: dict) -> "EtaFeatureMap":
        return cls(d["kind"], d.get("degree"))


@dataclass(frozen=True, eq=False)
class Correction:
    """Fitted correction ``eta_hat(x) = theta' phi(x)``."""

    theta: np.ndarray
    feature_map: EtaFeatureMap
    condition_number: float
    n_used: int
    input_dim: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise IdentifiabilityError("correction parameters are not finite")
        if theta.size != self.feature_map.n_params(self.input_dim):
            raise DataError(
                f"theta has {theta.size} entries, feature map needs "
                f"{self.feature_map.n_params(self.input_dim)} for {self.input_dim} inputs"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def eta(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[1] != self.input_dim:
            raise DataError(f"correction expects {self.input_dim} inputs, got {X.shape[1]}")
        return self.feature_map(X) @ self.theta

    def to_json(self) -> dict:
        return {
            "theta": [float(v) for v in self.theta],
            "feature_map": self.feature_map.to_dict(),
            "condition_number": float(self.condition_number),
            "n_used": int(self.n_used),
            "input_dim": int(self.input_dim),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Correction":
        try:
            return cls(
                np.array(d["theta"], dtype=np.float64),
                EtaFeatureMap.from_dict(d["feature_map"]),
                float(d["condition_number"]),
                int(d["n_used"]),
                int(d["input_dim"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed correction: {exc}") from exc


def least_squares(Phi: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, float]:
    """Unregularized least squares via SVD of the column-equilibrated design.

    Returns ``(theta, condition_number)``; the condition number is that of the
    design after scaling every column to unit norm, so it reflects genuine
    collinearity rather than feature units.
    """
    n, p = Phi.shape
    if n < p:
        raise IdentifiabilityError(f"{n} rows cannot identify {p} correction parameters")
    scale = np.linalg.norm(Phi, axis=0)
    if np.any(scale == 0.0):
        j = int(np.flatnonzero(scale == 0.0)[0])
        raise IdentifiabilityError(
            f"correction feature {j} is identically zero on the unconfounded sample; "
            "its parameter is not identified"
        )
    U, s, Vt = np.linalg.svd(Phi / scale, full_matrices=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    if cond > CONDITION_LIMIT:
        raise IdentifiabilityError(
            "correction parameters are not identified: the mapped-feature second-moment "
            f"matrix is singular on the unconfounded sample (condition number {cond:.3g} "
            f"> {CONDITION_LIMIT:.0e})"
        )
    theta = (Vt.T @ ((U.T @ r) / s)) / scale
    return theta, cond


def fit_correction(
    unc: Dataset,
    omega,
    feature_map: EtaFeatureMap = EtaFeatureMap(),
    margin: float = DEFAULT_MARGIN,
    allow_constant: bool = True,
) -> Correction:
    """Least-squares fit of ``q * Y - omega_hat(X)`` on ``phi(X)`` over the unconfounded sample."""
    z = pseudo_outcomes(unc, margin=margin, allow_constant=allow_constant)
    residual = z - np.asarray(omega.predict_effect(unc.features), dtype=np.float64)
    Phi = feature_map(unc.features)
    theta, cond = least_squares(Phi, residual)
    return Correction(theta, feature_map, cond, unc.n, unc.d)


def input_dim(model) -> int | None:
    if isinstance(model, LinearModel):
        return model.coefficients.shape[0]
    if isinstance(model, ForestModel):
        return model.n_features
    if isinstance(model, DifferenceModel):
        return input_dim(model.treated)
    if isinstance(model, PseudoOutcomeModel):
        return input_dim(model.regressor)
    if isinstance(model, CorrectedCateModel):
        return model.correction.input_dim
    return getattr(model, "input_dim", None)


@dataclass(frozen=True, eq=False)
class CorrectedCateModel:
    """``tau_hat(x) = omega_hat(x) + theta' phi(x)``."""

    omega: object
    correction: Correction
    diagnostics: PairDiagnostics | None = None

    def predict_effect(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return self.omega.predict_effect(X) + self.correction.eta(X)


def corrected_model(omega, correction: Correction, diagnostics: PairDiagnostics | None = None) -> CorrectedCateModel:
    dim = input_dim(omega)
    if dim is not None and dim != correction.input_dim:
        raise DataError(
            f"base model takes {dim} features but the correction was fit on {correction.input_dim}"
        )
    return CorrectedCateModel(omega, correction, diagnostics)


def _step(number: int, what: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (GroundedCateError, ValueError) as exc:
        raise AlgorithmStepError(number, f"{what}: {exc}") from exc


def remove_hidden_confounding(
    conf: Dataset,
    unc: Dataset,
    spec: CateEstimatorSpec = CateEstimatorSpec(),
    feature_map: EtaFeatureMap = EtaFeatureMap(),
    seed: int = 0,
    margin: float = DEFAULT_MARGIN,
    allow_constant: bool = True,
    threads: int | None = None,
    omega=None,
) -> CorrectedCateModel:
    """Fit the corrected CATE estimator.

    Steps: 1 validate the pair, 2 fit the base estimator on ``conf``, 3 fit
    the correction on ``unc``, 4 compose. Failures surface as
    :class:`AlgorithmStepError` carrying the step number, chained to the
    original exception. A pre-fitted ``omega`` skips step 2.
    """
    diagnostics = _step(1, "validating the sample pair", validate_pair, conf, unc)
    if omega is None:
        omega = _step(2, "fitting the base CATE estimator on the confounded sample",
                      fit_cate, conf, spec, seed=seed, threads=threads)
    correction = _step(3, "fitting the confounding correction on the unconfounded sample",
                       fit_correction, unc, omega, feature_map, margin, allow_constant)
    return _step(4, "composing the corrected model", corrected_model, omega, correction, diagnostics)
