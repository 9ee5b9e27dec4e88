"""Held-out RMSE evaluation, baseline comparisons, and seeded parameter sweeps.

Every random choice is drawn from a seed derived from ``(root seed, cell
index, ...)``, so sweeps give the same numbers for any thread count or
execution order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, round_half_away, split_indices
from .errors import DataError, SplitError
from .grounding import EtaFeatureMap, fit_correction, remove_hidden_confounding
from .learners.cate import DIFFERENCE, PSEUDO_OUTCOME, CateEstimatorSpec, RidgeParams, fit_cate
from .learners.forest import ForestParams
from .parallel import derive_seed, resolve_threads
from .semisynth import InjectionResult, InjectionSpec, inject_confounding
from .simgen import (
    SimConfig,
    eta_sign,
    gen_confounded,
    gen_unconfounded,
    oracle_omega_model,
    true_tau,
    true_theta,
)

logger = logging.getLogger(__name__)

DEFAULT_HOLDOUT = 0.25
DEFAULT_REPS = 20
DEFAULT_Q_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)

# name -> (estimator, base regressor, training sample)
METHODS = {
    "RF Y_GT (UNC)": ("pseudo", "forest", "unc"),
    "ridge Y_GT (UNC)": ("pseudo", "ridge_cv", "unc"),
    "RF DIFF (CONF)": ("diff", "forest", "conf"),
    "ridge DIFF (CONF)": ("diff", "ridge_cv", "conf"),
    "RF DIFF (UNC)": ("diff", "forest", "unc"),
    "ridge DIFF (UNC)": ("diff", "ridge_cv", "unc"),
    "2 step RF": ("two_step", "forest", "both"),
    "2 step ridge": ("two_step", "ridge_cv", "both"),
}
_BASE_CODE = {"forest": 1, "ridge_cv": 2}
_SAMPLE_CODE = {"unc": 1, "conf": 2}


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size < 1:
        raise ValueError("rmse of an empty vector")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _digest(rows) -> str:
    return hashlib.sha256(np.asarray(rows, dtype=np.int64).tobytes()).hexdigest()[:16]


@dataclass
class EvalReport:
    method_name: str
    rmse: float | None
    n_eval: int
    seed: int
    config_fingerprint: str
    status: str = "ok"
    heldout_digest: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_model(model, eval_pool: Dataset, y_gt, holdout_fraction: float = DEFAULT_HOLDOUT,
                   seed: int = 0, method_name: str = "model") -> EvalReport:
    """RMSE of ``model`` against ground-truth pseudo-outcomes on a seeded held-out split."""
    y_gt = np.asarray(y_gt, dtype=np.float64)
    if y_gt.shape != (eval_pool.n,):
        raise DataError(f"y_gt has shape {y_gt.shape}, eval pool has {eval_pool.n} rows")
    held, _ = split_indices(eval_pool.n, holdout_fraction, seed)
    logger.debug("held-out rows for %s: %s", method_name, held.tolist())
    pred = model.predict_effect(eval_pool.features[held])
    return EvalReport(
        method_name,
        rmse(pred, y_gt[held]),
        int(held.size),
        int(seed),
        fingerprint({"holdout_fraction": holdout_fraction, "seed": seed, "method": method_name}),
        heldout_digest=_digest(held),
    )


def sim_as_injection(unc: Dataset, conf: Dataset) -> InjectionResult:
    """Package a simulated pair for :func:`run_baselines`.

    The evaluation pool is the confounded sample itself, with the noiseless
    effect as target; held-out rows are withheld from every fit.
    """
    from .simgen import FEATURE

    if conf.feature_names != (FEATURE,):
        raise DataError("sim_as_injection expects one-covariate simulation data")
    y = np.asarray(true_tau(conf.features[:, 0]))
    rows = np.arange(conf.n)
    q = float(unc.propensity[0]) if unc.propensity is not None else float(unc.treatment.mean())
    return InjectionResult(unc, conf, conf, y, q, {"source": "simulation", "n_all": conf.n},
                           np.empty(0, dtype=np.intp), rows, rows)


def heldout_rows(result: InjectionResult, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions into ``eval_pool`` held out for scoring, and the matching original row ids.

    Every original row gets a seeded random priority; the held-out set is the
    ``round(holdout_fraction * |eval_pool|)`` pool rows of lowest priority.
    With a shared seed, injections whose UNC sets are nested therefore get
    nearly nested held-out sets, which keeps q' curves comparable.
    """
    n_eval = result.eval_pool.n
    if not 0.0 < holdout_fraction < 1.0:
        raise SplitError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    k = round_half_away(holdout_fraction * n_eval)
    if k < 1 or k > n_eval - 1:
        raise SplitError(f"holding out {holdout_fraction} of {n_eval} rows leaves a side empty")
    n_all = int(result.audit.get("n_all", int(result.eval_rows.max()) + 1))
    priority = np.random.default_rng(derive_seed(seed, 0)).permutation(n_all)
    order = np.argsort(priority[result.eval_rows], kind="stable")
    held = np.sort(order[:k])
    return held, result.eval_rows[held]


def run_baselines(
    result: InjectionResult,
    methods: Sequence[str] | None = None,
    holdout_fraction: float = DEFAULT_HOLDOUT,
    seed: int = 0,
    forest: ForestParams = ForestParams(),
    ridge: RidgeParams = RidgeParams(),
    feature_map: EtaFeatureMap = EtaFeatureMap(),
    threads: int | None = None,
) -> list[EvalReport]:
    """Fit each method and score all of them on one shared held-out set.

    Observational rows that fall in the held-out set are removed from CONF
    before fitting. A failing method yields a report with an error status;
    the others still run.
    """
    methods = list(METHODS) if methods is None else list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; expected names from {list(METHODS)}")
    held, held_ids = heldout_rows(result, holdout_fraction, seed)
    conf_train = result.conf.take(np.flatnonzero(~np.isin(result.conf_rows, held_ids)))
    X_eval = result.eval_pool.features[held]
    target = result.y_gt[held]
    digest = _digest(held_ids)
    samples = {"unc": result.unc, "conf": conf_train}
    omega_cache: dict = {}

    def spec_for(kind, base):
        est = DIFFERENCE if kind in ("diff", "two_step") else PSEUDO_OUTCOME
        return CateEstimatorSpec(est, base, forest, ridge)

    def fit_one(name):
        kind, base, sample = METHODS[name]
        spec = spec_for(kind, base)
        if kind == "two_step":
            omega = omega_cache.get(base)
            if omega is None:
                omega = fit_one_diff_conf(base)
            return remove_hidden_confounding(
                conf_train, result.unc, spec, feature_map, omega=omega, threads=threads
            )
        if kind == "diff" and sample == "conf":
            return fit_one_diff_conf(base)
        s = derive_seed(seed, 1, _BASE_CODE[base], _SAMPLE_CODE[sample], 1 if kind == "diff" else 2)
        return fit_cate(samples[sample], spec, seed=s, threads=threads)

    def fit_one_diff_conf(base):
        if base not in omega_cache:
            s = derive_seed(seed, 1, _BASE_CODE[base], _SAMPLE_CODE["conf"], 1)
            omega_cache[base] = fit_cate(conf_train, spec_for("diff", base), seed=s, threads=threads)
        return omega_cache[base]

    reports = []
    for name in methods:
        config = {
            "method": name,
            "holdout_fraction": holdout_fraction,
            "seed": seed,
            "forest": forest.to_dict(),
            "ridge": ridge.to_dict(),
            "feature_map": feature_map.to_dict(),
        }
        try:
            model = fit_one(name)
            value = rmse(model.predict_effect(X_eval), target)
            status = "ok"
        except Exception as exc:  # recorded per method; the remaining methods still run
            logger.warning("method %s failed: %s", name, exc)
            value, status = None, f"error: {type(exc).__name__}: {exc}"
        reports.append(EvalReport(name, value, int(held.size), int(seed), fingerprint(config), status, digest))
    return reports


@dataclass(frozen=True)
class SweepPoint:
    axis_value: float
    method: str
    seed: int
    rmse: float | None
    status: str = "ok"
    rep: int = 0


@dataclass
class SweepResult:
    """Rows of a sweep.

    For ``n_unc`` sweeps of the correction the ``rmse`` column carries the
    squared parameter error ``||theta_hat - theta_0||^2``.
    """

    axis: str
    points: list[SweepPoint] = field(default_factory=list)

    COLUMNS = ("axis_name", "axis_value", "method", "seed", "rmse", "status")

    def __post_init__(self):
        keys = [(p.axis_value, p.method, p.seed) for p in self.points]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (axis value, method, seed) rows in sweep")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for p in self.points:
                w.writerow([
                    self.axis, repr(float(p.axis_value)), p.method, p.seed,
                    "" if p.rmse is None else repr(float(p.rmse)), p.status,
                ])

    def values(self, method: str, axis_value: float) -> np.ndarray:
        return np.array([p.rmse for p in self.points
                         if p.method == method and p.axis_value == axis_value and p.status == "ok"])

    def axis_values(self) -> list[float]:
        return sorted({p.axis_value for p in self.points})

    def methods(self) -> list[str]:
        seen = []
        for p in self.points:
            if p.method not in seen:
                seen.append(p.method)
        return seen

    def medians(self) -> dict[str, dict[float, float]]:
        out = {}
        for m in self.methods():
            out[m] = {}
            for a in self.axis_values():
                v = self.values(m, a)
                out[m][a] = float(np.median(v)) if v.size else math.nan
        return out

    def summary(self) -> dict:
        cells = []
        for m in self.methods():
            for a in self.axis_values():
                pts = [p for p in self.points if p.method == m and p.axis_value == a]
                ok = [p.rmse for p in pts if p.status == "ok"]
                cells.append({
                    "axis_value": a,
                    "method": m,
                    "median": float(np.median(ok)) if ok else None,
                    "n_ok": len(ok),
                    "n_failed": len(pts) - len(ok),
                })
        out = {
            "axis_name": self.axis,
            "cells": cells,
            "n_points": len(self.points),
            "n_failed": sum(p.status != "ok" for p in self.points),
        }
        if self.axis == "n_unc":
            out["rate"] = {m: rate_fit(self, m) for m in self.methods()}
        return out


def count_inversions(values: Sequence[float]) -> int:
    """Number of consecutive increases in a curve that should be non-increasing."""
    return sum(1 for a, b in zip(values[:-1], values[1:]) if b > a)


def rate_fit(result: SweepResult, method: str) -> dict:
    """Log-log slope of median error against the axis, plus successive median ratios."""
    xs = result.axis_values()
    med = [result.medians()[method][x] for x in xs]
    usable = [(x, m) for x, m in zip(xs, med) if m and m > 0 and math.isfinite(m)]
    slope = None
    if len(usable) >= 2:
        lx, lm = np.log([u[0] for u in usable]), np.log([u[1] for u in usable])
        slope = float(np.polyfit(lx, lm, 1)[0])
    ratios = [med[i] / med[i + 1] if med[i + 1] else None for i in range(len(med) - 1)]
    return {"axis_values": xs, "medians": med, "loglog_slope": slope, "successive_ratios": ratios}


def _run_cells(job, n_cells: int, threads: int | None):
    workers = resolve_threads(threads)
    if workers <= 1:
        return [job(i) for i in range(n_cells)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(n_cells)))


def sweep_q_prime(
    all_rows: Dataset,
    template: InjectionSpec,
    grid: Sequence[float] = DEFAULT_Q_GRID,
    reps: int = DEFAULT_REPS,
    methods: Sequence[str] | None = None,
    seed: int = 0,
    holdout_fraction: float = DEFAULT_HOLDOUT,
    forest: ForestParams = ForestParams(),
    ridge: RidgeParams = RidgeParams(),
    feature_map: EtaFeatureMap = EtaFeatureMap(),
    threads: int | None = None,
) -> SweepResult:
    """Fresh injection and baseline comparison for every ``(q_prime, rep)`` cell.

    The cell seed depends on the replicate only, so all q' values of one
    replicate share common random numbers: nested UNC draws, nearly nested
    held-out sets and identical learner seeds. Differences along the curve
    then reflect the UNC size rather than a fresh draw of evaluation noise.
    """
    grid = list(grid)
    if not grid or reps < 1:
        raise ValueError("need a non-empty grid and reps >= 1")
    methods = list(METHODS) if methods is None else list(methods)
    cells = [(qi, rep) for qi in range(len(grid)) for rep in range(reps)]

    def job(i):
        qi, rep = cells[i]
        cell_seed = derive_seed(seed, rep)
        qp = float(grid[qi])
        spec = InjectionSpec(template.split_col, qp, derive_seed(cell_seed, 0),
                             template.drop_split_col, template.q)
        try:
            result = inject_confounding(all_rows, spec)
        except Exception as exc:
            status = f"error: {type(exc).__name__}: {exc}"
            return [SweepPoint(qp, m, cell_seed, None, status, rep) for m in methods]
        reports = run_baselines(result, methods, holdout_fraction, derive_seed(cell_seed, 1),
                                forest, ridge, feature_map, threads=1)
        return [SweepPoint(qp, r.method_name, cell_seed, r.rmse, r.status, rep) for r in reports]

    rows = _run_cells(job, len(cells), threads)
    return SweepResult("q_prime", [p for cell in rows for p in cell])


def sweep_rate(
    template: SimConfig = SimConfig(),
    n_grid: Sequence[int] = (1000, 4000, 16000),
    reps: int = 50,
    seed: int = 0,
    oracle_omega: bool = True,
    spec: CateEstimatorSpec = CateEstimatorSpec(base="forest"),
    feature_map: EtaFeatureMap = EtaFeatureMap(),
    n_mc: int = 2_000_000,
    threads: int | None = None,
) -> SweepResult:
    """Squared error of the fitted correction against the true one as ``n_unc`` grows.

    In oracle mode the base model is the Monte Carlo observational contrast,
    so only the experimental-sample noise remains and the error should fall
    like ``1/n``. Otherwise a base estimator is fitted on a fresh
    confounded sample of ``template.n_conf`` rows per replicate. The sign of
    the true linear confounding term is read off the Monte Carlo oracle.
    """
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly ascending")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    oracle = oracle_omega_model(n_mc=n_mc, seed=derive_seed(seed, 10**6),
                                noise_scale=template.noise_scale,
                                include_confounding=template.include_confounding)
    sign = eta_sign(oracle) if template.include_confounding else 0.0
    theta0 = true_theta(feature_map, sign)
    method = "2 step oracle" if oracle_omega else f"2 step {spec.base}"
    cells = [(ni, rep) for ni in range(len(n_grid)) for rep in range(reps)]

    def job(i):
        ni, rep = cells[i]
        cell_seed = derive_seed(seed, ni, rep)
        cfg = SimConfig(n_grid[ni], template.n_conf, cell_seed, template.noise_scale,
                        template.include_confounding)
        try:
            unc = gen_unconfounded(cfg)
            if oracle_omega:
                omega = oracle
            else:
                omega = fit_cate(gen_confounded(cfg), spec, seed=derive_seed(cell_seed, 1), threads=1)
            theta = fit_correction(unc, omega, feature_map).theta
            return SweepPoint(float(n_grid[ni]), method, cell_seed,
                              float(np.sum((theta - theta0) ** 2)), "ok", rep)
        except Exception as exc:
            return SweepPoint(float(n_grid[ni]), method, cell_seed, None,
                              f"error: {type(exc).__name__}: {exc}", rep)

    return SweepResult("n_unc", _run_cells(job, len(cells), threads))


def weighted_grid_rmse(model, grid, weights, truth) -> float:
    """RMSE against ``truth`` on ``grid``, weighted by ``weights`` (normalized here)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != np.shape(grid) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, match the grid, and not all zero")
    err = model.predict_effect(np.asarray(grid, dtype=np.float64).reshape(-1, 1)) - np.asarray(truth)
    return float(np.sqrt(np.sum(w * err**2) / w.sum()))


def simulation_comparison(
    cfg: SimConfig,
    spec: CateEstimatorSpec = CateEstimatorSpec(base="forest"),
    feature_map: EtaFeatureMap = EtaFeatureMap(),
    grid=np.linspace(-3.0, 3.0, 121),
    threads: int | None = None,
) -> dict[str, float]:
    """Corrected vs uncorrected vs experimental-only effect curves on one simulated pair.

    Errors are measured against the true effect on ``grid``, weighted by the
    standard normal density of the observational covariate. The
    experimental-only estimate is a difference of regressions fitted on the
    unconfounded sample and extrapolated beyond its ``[-1, 1]`` support.
    """
    unc, conf = gen_unconfounded(cfg), gen_confounded(cfg)
    grid = np.asarray(grid, dtype=np.float64)
    w = np.exp(-0.5 * grid**2)
    truth = true_tau(grid)
    omega = fit_cate(conf, spec, seed=derive_seed(cfg.seed, 1), threads=threads)
    corrected = remove_hidden_confounding(conf, unc, spec, feature_map, omega=omega, threads=threads)
    unc_only = fit_cate(unc, CateEstimatorSpec(DIFFERENCE, spec.base, spec.forest, spec.ridge),
                        seed=derive_seed(cfg.seed, 2), threads=threads)
    return {
        "2 step": weighted_grid_rmse(corrected, grid, w, truth),
        "uncorrected": weighted_grid_rmse(omega, grid, w, truth),
        "UNC DIFF": weighted_grid_rmse(unc_only, grid, w, truth),
        "theta": corrected.correction.theta.tolist(),
    }
