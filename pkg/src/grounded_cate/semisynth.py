"""Turn a constant-propensity RCT table into confounded/unconfounded study pairs.

Given a binary stratum covariate (A = 1, B = 0):

* UNC is a uniform random ``q_prime`` fraction of stratum A, so treatment is
  still randomized within it.
* CONF keeps every control outside UNC but only the lower half (by outcome)
  of each stratum's treated rows, which biases naive contrasts downward and
  makes the stratum an unmeasured confounder once it is dropped.
* The evaluation pool is every row outside UNC, with ground-truth
  pseudo-outcomes ``Y / (q + T - 1)``.

Conventions the procedure leaves open, fixed here and recorded in the audit:
the lower half is the ``floor(m / 2)`` smallest outcomes with ties broken by
row index; it is computed over all of a stratum's treated rows before UNC is
drawn; UNC rows never enter CONF.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, round_half_away, write_csv
from .errors import DataError

STRATUM_A, STRATUM_B = 1, 0


def ground_truth_outcomes(ds: Dataset, q: float) -> np.ndarray:
    """``Y / (q + T - 1)``: unbiased for the CATE when the propensity is the constant ``q``."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    # q + T - 1 per arm, written so the treated denominator is exactly q
    return ds.outcome / np.where(ds.treatment == 1, q, q - 1.0)


@dataclass(frozen=True)
class InjectionSpec:
    split_col: str
    q_prime: float = 0.5
    seed: int = 0
    drop_split_col: bool = True
    q: float | None = None  # None -> estimated as mean(T) over the whole table

    def __post_init__(self):
        if not 0.0 < self.q_prime <= 1.0:
            raise ValueError(f"q_prime must lie in (0, 1], got {self.q_prime}")
        if self.q is not None and not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")


@dataclass(frozen=True, eq=False)
class InjectionResult:
    unc: Dataset
    conf: Dataset
    eval_pool: Dataset
    y_gt: np.ndarray
    q: float
    audit: dict
    unc_rows: np.ndarray = field(default=None)
    conf_rows: np.ndarray = field(default=None)
    eval_rows: np.ndarray = field(default=None)

    def write(self, out_dir, treatment_col="t", outcome_col="y", propensity_col="propensity", y_gt_col="y_gt"):
        """Write ``unc.csv``, ``conf.csv``, ``eval_pool.csv`` and ``audit.json`` into ``out_dir``."""
        from pathlib import Path

        out = Path(out_dir)
        cols = dict(treatment_col=treatment_col, outcome_col=outcome_col, propensity_col=propensity_col)
        write_csv(self.unc, out / "unc.csv", **cols)
        write_csv(self.conf, out / "conf.csv", **cols)
        write_csv(self.eval_pool, out / "eval_pool.csv", extra_columns={y_gt_col: self.y_gt}, **cols)
        with open(out / "audit.json", "w", encoding="utf-8") as fh:
            json.dump(self.audit, fh, indent=2, sort_keys=True)
            fh.write("\n")


def lower_half(rows: np.ndarray, outcome: np.ndarray) -> np.ndarray:
    """The ``floor(m / 2)`` rows with smallest outcome; ties go to the lower row index."""
    rows = np.sort(rows)
    order = np.argsort(outcome[rows], kind="stable")
    return np.sort(rows[order[: rows.size // 2]])


def inject_confounding(all_rows: Dataset, spec: InjectionSpec) -> InjectionResult:
    if spec.split_col not in all_rows.feature_names:
        raise DataError(f"split column {spec.split_col!r} not among features {list(all_rows.feature_names)}")
    s = all_rows.column(spec.split_col)
    if not np.all((s == 0) | (s == 1)):
        raise DataError(f"split column {spec.split_col!r} must be binary 0/1")
    t = all_rows.treatment
    y = all_rows.outcome
    strata = {"A": np.flatnonzero(s == STRATUM_A), "B": np.flatnonzero(s == STRATUM_B)}
    for name, rows in strata.items():
        n1 = int(t[rows].sum())
        if rows.size == 0 or n1 == 0 or n1 == rows.size:
            raise DataError(f"stratum {name} needs rows in both arms ({rows.size} rows, {n1} treated)")

    q = float(t.mean()) if spec.q is None else float(spec.q)
    if not 0.0 < q < 1.0:
        raise DataError(f"treated fraction {q} leaves an arm empty")

    a_rows = strata["A"]
    n_unc = round_half_away(spec.q_prime * a_rows.size)
    if n_unc < 1:
        raise DataError(f"q_prime={spec.q_prime} of {a_rows.size} stratum-A rows leaves UNC empty")
    # prefix of one permutation: with a fixed seed, UNC grows nested in q_prime
    rng = np.random.default_rng(spec.seed)
    unc_rows = np.sort(rng.permutation(a_rows)[:n_unc])
    in_unc = np.zeros(all_rows.n, dtype=bool)
    in_unc[unc_rows] = True

    keep = np.zeros(all_rows.n, dtype=bool)
    stratum_audit = {}
    for name, rows in strata.items():
        treated = rows[t[rows] == 1]
        low = lower_half(treated, y)
        keep[rows[t[rows] == 0]] = True
        keep[low] = True
        stratum_audit[name] = {
            "n": int(rows.size),
            "treated": int(treated.size),
            "control": int(rows.size - treated.size),
            "treated_median": float(np.median(y[treated])),
            "treated_lower_half_size": int(low.size),
            "treated_lower_half_max": float(y[low].max()) if low.size else None,
        }
    keep &= ~in_unc
    conf_rows = np.flatnonzero(keep)
    eval_rows = np.flatnonzero(~in_unc)

    counts = {}
    for name, rows in strata.items():
        counts[name] = {}
        for arm_name, arm in (("treated", 1), ("control", 0)):
            r = rows[t[rows] == arm]
            n_u = int(in_unc[r].sum())
            n_c = int(keep[r].sum())
            counts[name][arm_name] = {"unc": n_u, "conf": n_c, "removed": int(r.size - n_u - n_c)}

    base = all_rows.drop_features([spec.split_col]) if spec.drop_split_col else all_rows
    unc = base.take(unc_rows).with_propensity(q)
    conf = base.take(conf_rows).without_propensity()
    eval_pool = base.take(eval_rows).without_propensity()
    y_gt = ground_truth_outcomes(eval_pool, q)
    y_gt.setflags(write=False)

    audit = {
        "seed": int(spec.seed),
        "q_prime": float(spec.q_prime),
        "q": q,
        "q_source": "estimated" if spec.q is None else "override",
        "split_col": spec.split_col,
        "split_col_dropped": bool(spec.drop_split_col),
        "n_all": int(all_rows.n),
        "n_unc": int(unc_rows.size),
        "n_conf": int(conf_rows.size),
        "n_eval_pool": int(eval_rows.size),
        "strata": stratum_audit,
        "counts": counts,
        "policy": {
            "lower_half": "floor(m/2) smallest outcomes, ties by row index",
            "lower_half_computed": "before UNC removal, over all treated rows of the stratum",
            "unc_conf_disjoint": True,
        },
    }
    return InjectionResult(
        unc, conf, eval_pool, y_gt, q, audit,
        _ro(unc_rows), _ro(conf_rows), _ro(eval_rows),
    )


def _ro(a):
    a = np.asarray(a, dtype=np.intp)
    a.setflags(write=False)
    return a


def naive_ate(ds: Dataset) -> float:
    """Difference of arm means, the estimate that assumes no confounding."""
    t = ds.treatment == 1
    return float(ds.outcome[t].mean() - ds.outcome[~t].mean())


def star_like_rct(
    seed: int = 0,
    n: int = 4218,
    n_a: int = 2811,
    n_treated: int = 1805,
    noise_scale: float = 1.0,
) -> Dataset:
    """Synthetic class-size-style RCT with a binary ``rural`` stratum column.

    Treatment is completely randomized with exactly ``n_treated`` treated
    rows, so the propensity is the constant ``n_treated / n``. Covariates are
    ``girl``, ``free_lunch`` (more common in the rural stratum), ``white``
    and a standardized ``age``. The effect is positive on average and varies
    with age, sex and free-lunch status; outcomes are noise dominated.
    """
    if not 0 < n_a < n or not 0 < n_treated < n:
        raise ValueError("need 0 < n_a < n and 0 < n_treated < n")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    rural = np.zeros(n)
    rural[rng.permutation(n)[:n_a]] = 1.0
    t = np.zeros(n, dtype=np.int64)
    t[rng.permutation(n)[:n_treated]] = 1
    girl = rng.binomial(1, 0.5, n).astype(float)
    free_lunch = rng.binomial(1, np.where(rural == 1, 0.55, 0.35)).astype(float)
    white = rng.binomial(1, 0.65, n).astype(float)
    age = rng.standard_normal(n) + np.where(rural == 1, -0.5, 1.5)
    tau = star_like_tau(girl, free_lunch, age)
    # treated outcomes do not depend on covariates, so lower-half selection
    # shifts them by the same amount everywhere; the stratum offsets give
    # both strata about the same ground-truth pseudo-outcome variance
    y = 0.95 - 0.25 * rural - (1 - t) * tau + noise_scale * rng.standard_normal(n)
    X = np.column_stack([rural, girl, free_lunch, white, age])
    return Dataset(X, ("rural", "girl", "free_lunch", "white", "age"), t, y, np.full(n, n_treated / n))


def star_like_tau(girl, free_lunch, age):
    """Effect function of :func:`star_like_rct` (it does not depend on the stratum)."""
    return 0.3 + 0.6 * np.logaddexp(0.0, 2.0 * age) + 0.3 * girl - 0.4 * free_lunch
