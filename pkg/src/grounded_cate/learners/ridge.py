"""Ridge regression with an unpenalized intercept, plus k-fold selection of the penalty.

The penalized problem

    minimize ||y - X beta - b 1||^2 + lam ||beta||^2

is solved by centering X and y (which removes the intercept exactly) and
taking an SVD of the centered design:

    beta = V diag(s / (s^2 + lam)) U^T y_c,    b = mean(y) - mean(X) beta.

One factorization serves every penalty in a grid, which is what makes the
cross-validated variant cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, SingularDesignError

CONDITION_LIMIT = 1e10
DEFAULT_LAMBDAS = tuple(np.logspace(-4, 4, 9).tolist())
DEFAULT_FOLDS = 5


@dataclass(frozen=True, eq=False)
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    lambda_used: float

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=np.float64)
        if not (np.all(np.isfinite(coef)) and np.isfinite(self.intercept)):
            raise SingularDesignError("ridge solution is not finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "lambda_used", float(self.lambda_used))

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.coefficients + self.intercept


class _CenteredSVD:
    """SVD of a centered design, reusable across penalties."""

    def __init__(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DataError(f"incompatible shapes X{X.shape}, y{y.shape}")
        if X.shape[0] < 1:
            raise DataError("cannot fit on zero rows")
        self.x_mean = X.mean(axis=0)
        self.y_mean = float(y.mean())
        Xc = X - self.x_mean
        self.U, self.s, self.Vt = np.linalg.svd(Xc, full_matrices=False)
        self.Uty = self.U.T @ (y - self.y_mean)
        self.d = X.shape[1]

    def condition_number(self) -> float:
        if self.d == 0:
            return 1.0
        if self.s.size < self.d or self.s[-1] == 0.0:
            return np.inf
        return float(self.s[0] / self.s[-1])

    def solve(self, lam: float) -> LinearModel:
        if lam == 0.0:
            cond = self.condition_number()
            if cond > CONDITION_LIMIT:
                raise SingularDesignError(
                    f"centered design is singular (condition number {cond:.3g}) and lambda=0"
                )
            shrink = 1.0 / self.s
        else:
            shrink = self.s / (self.s**2 + lam)
        beta = self.Vt.T @ (shrink * self.Uty)
        return LinearModel(beta, self.y_mean - float(self.x_mean @ beta), lam)


def ridge_fit(X, y, lam: float) -> LinearModel:
    """Single-penalty ridge fit.

    Raises :class:`SingularDesignError` when ``lam == 0`` and the centered
    design has condition number above 1e10.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be a nonnegative finite number, got {lam}")
    return _CenteredSVD(X, y).solve(float(lam))


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` folds of near-equal size."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def ridge_cv_fit(X, y, lambdas=DEFAULT_LAMBDAS, k: int = DEFAULT_FOLDS, seed: int = 0) -> LinearModel:
    """Pick the penalty with the lowest mean k-fold validation MSE, then refit on all rows.

    Ties go to the smallest penalty.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n < k:
        raise DataError(f"cannot run {k}-fold cross-validation on {n} rows")
    lambdas = sorted(float(v) for v in lambdas)
    if not lambdas or lambdas[0] < 0:
        raise ValueError("lambda grid must be non-empty and nonnegative")
    folds = kfold_indices(n, k, seed)
    mse = np.zeros(len(lambdas))
    for held in folds:
        train = np.setdiff1d(np.arange(n), held, assume_unique=True)
        svd = _CenteredSVD(X[train], y[train])
        for j, lam in enumerate(lambdas):
            try:
                pred = svd.solve(lam).predict(X[held])
            except SingularDesignError:
                mse[j] += np.inf
                continue
            mse[j] += np.mean((y[held] - pred) ** 2)
    mse /= k
    if not np.any(np.isfinite(mse)):
        raise SingularDesignError("every penalty in the grid failed on some fold")
    best = int(np.argmin(mse))  # first minimum = smallest lambda
    return ridge_fit(X, y, lambdas[best])
