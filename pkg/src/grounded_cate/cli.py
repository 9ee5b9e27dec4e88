"""``grounded-cate`` command line: simulate, inject, fit, evaluate, sweep.

Each command takes an optional JSON config (``--config``); flags override
config values. The fully resolved config, including a generated seed when
none was given, is written to ``config.json`` in the output directory, and
rerunning from that file reproduces every output byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
import warnings
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .artifacts import check_features, load_model, save_model
from .data import ColumnSchema, categorical_levels, load_csv, read_csv_table, split_indices, write_csv
from .errors import DataError, GroundedCateError
from .evaluation import DEFAULT_Q_GRID, METHODS, evaluate_model, sweep_q_prime, sweep_rate
from .grounding import DEFAULT_MARGIN, EtaFeatureMap, remove_hidden_confounding
from .learners.cate import DIFFERENCE, CateEstimatorSpec, RidgeParams
from .learners.forest import ForestParams
from .learners.ridge import DEFAULT_FOLDS, DEFAULT_LAMBDAS
from .parallel import derive_seed
from .semisynth import InjectionSpec, inject_confounding
from .simgen import SimConfig, gen_confounded, gen_unconfounded, mc_true_omega, true_tau

logger = logging.getLogger("grounded_cate")

SEED_MAX = 2**31 - 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SchemaConfig(_Strict):
    """CSV column roles. The propensity column is used when the file has it."""

    treatment_col: str = "t"
    outcome_col: str = "y"
    propensity_col: Optional[str] = "propensity"
    categorical_cols: list[str] = []
    drop_cols: list[str] = []
    drop_first: bool = False


class SimSection(_Strict):
    n_unc: int = Field(2000, ge=1)
    n_conf: int = Field(20000, ge=1)
    noise_scale: float = Field(0.5, ge=0)
    include_confounding: bool = True

    def build(self, seed: int) -> SimConfig:
        return SimConfig(self.n_unc, self.n_conf, seed, self.noise_scale, self.include_confounding)


class OracleSection(_Strict):
    n_mc: int = Field(1_000_000, ge=10_000)
    bandwidth: float = Field(0.1, gt=0)
    grid_min: float = -3.0
    grid_max: float = 3.0
    grid_points: int = Field(121, ge=2)


class ForestSection(_Strict):
    n_trees: int = Field(200, ge=1)
    min_leaf: int = Field(5, ge=1)
    max_depth: Optional[int] = Field(None, ge=1)
    mtry: Optional[int] = Field(None, ge=1)
    bootstrap: bool = True


class RidgeSection(_Strict):
    lambdas: list[float] = list(DEFAULT_LAMBDAS)
    folds: int = Field(DEFAULT_FOLDS, ge=2)

    @field_validator("lambdas")
    @classmethod
    def _nonneg(cls, v):
        if not v or any(x < 0 for x in v):
            raise ValueError("lambdas must be a non-empty list of non-negative values")
        return v


class EstimatorSection(_Strict):
    kind: Literal["difference_of_regressions", "pseudo_outcome_regression"] = DIFFERENCE
    base: Literal["forest", "ridge"] = "forest"
    forest: ForestSection = Field(default_factory=ForestSection)
    ridge: RidgeSection = Field(default_factory=RidgeSection)

    def forest_params(self) -> ForestParams:
        return ForestParams(**self.forest.model_dump())

    def ridge_params(self) -> RidgeParams:
        return RidgeParams(tuple(self.ridge.lambdas), self.ridge.folds)

    def spec(self) -> CateEstimatorSpec:
        base = "ridge_cv" if self.base == "ridge" else "forest"
        return CateEstimatorSpec(self.kind, base, self.forest_params(), self.ridge_params())


def _check_eta_map(v: str) -> str:
    EtaFeatureMap.parse(v)
    return v


class _Run(_Strict):
    out: Optional[str] = None
    seed: Optional[int] = Field(None, ge=0, le=SEED_MAX)
    threads: Optional[int] = None


class SimulateConfig(_Run):
    command: Literal["simulate"] = "simulate"
    sim: SimSection = Field(default_factory=SimSection)
    oracle: OracleSection = Field(default_factory=OracleSection)


class InjectConfig(_Run):
    command: Literal["inject"] = "inject"
    input: str
    schema_: SchemaConfig = Field(default_factory=SchemaConfig, alias="schema")
    split_col: str
    q_prime: float = Field(0.5, gt=0, le=1)
    q: Optional[float] = Field(None, gt=0, lt=1)
    drop_split_col: bool = True

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class FitConfig(_Run):
    command: Literal["fit"] = "fit"
    conf: str
    unc: str
    schema_: SchemaConfig = Field(default_factory=SchemaConfig, alias="schema")
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    eta_map: str = "identity+intercept"
    overlap_margin: float = Field(DEFAULT_MARGIN, gt=0, lt=0.5)
    allow_constant_propensity: bool = True

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("eta_map")
    @classmethod
    def _eta_map(cls, v):
        return _check_eta_map(v)


class EvaluateConfig(_Run):
    command: Literal["evaluate"] = "evaluate"
    model: str
    eval_pool: str
    schema_: SchemaConfig = Field(default_factory=SchemaConfig, alias="schema")
    y_gt_col: str = "y_gt"
    holdout_fraction: float = Field(0.25, gt=0, lt=1)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SweepConfig(_Run):
    command: Literal["sweep"] = "sweep"
    kind: Literal["q_prime", "rate"] = "q_prime"
    threads: Optional[int] = 0  # sweeps default to every available core
    reps: int = Field(20, ge=1)
    eta_map: str = "identity+intercept"
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    # q_prime sweeps
    input: Optional[str] = None
    schema_: SchemaConfig = Field(default_factory=SchemaConfig, alias="schema")
    split_col: Optional[str] = None
    grid: list[float] = list(DEFAULT_Q_GRID)
    methods: list[str] = list(METHODS)
    holdout_fraction: float = Field(0.25, gt=0, lt=1)
    q: Optional[float] = Field(None, gt=0, lt=1)
    drop_split_col: bool = True
    # rate sweeps
    sim: SimSection = Field(default_factory=SimSection)
    n_grid: list[int] = [1000, 4000, 16000]
    oracle_omega: bool = True
    n_mc: int = Field(2_000_000, ge=10_000)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("eta_map")
    @classmethod
    def _eta_map(cls, v):
        return _check_eta_map(v)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v):
        unknown = [m for m in v if m not in METHODS]
        if unknown or not v:
            raise ValueError(f"unknown or empty methods {unknown}; choose from {list(METHODS)}")
        return v

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind == "q_prime":
            if self.input is None or self.split_col is None:
                raise ValueError("q_prime sweeps need 'input' and 'split_col'")
            if not self.grid or any(not 0 < g <= 1 for g in self.grid):
                raise ValueError("grid values must lie in (0, 1]")
        else:
            if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])) or self.n_grid[0] < 1:
                raise ValueError("n_grid must be a strictly ascending list of positive sizes")
        return self


CONFIGS = {
    "simulate": SimulateConfig,
    "inject": InjectConfig,
    "fit": FitConfig,
    "evaluate": EvaluateConfig,
    "sweep": SweepConfig,
}


# ---------------------------------------------------------------- helpers


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(out: str, force: bool) -> Path:
    p = Path(out)
    if p.exists():
        if not p.is_dir():
            raise DataError(f"output path {p} exists and is not a directory")
        if any(p.iterdir()) and not force:
            raise DataError(f"output directory {p} is not empty (use --force to write into it)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _schema(cfg: SchemaConfig, header, use_propensity: bool) -> ColumnSchema:
    prop = cfg.propensity_col if cfg.propensity_col in header else None
    drop = list(cfg.drop_cols)
    if prop is not None and not use_propensity:
        drop.append(prop)
        prop = None
    return ColumnSchema(cfg.treatment_col, cfg.outcome_col, prop, tuple(cfg.categorical_cols), tuple(drop), cfg.drop_first)


def _load(path, cfg: SchemaConfig, use_propensity=True, extra_cols=(), levels=None):
    header, _ = read_csv_table(path)
    return load_csv(path, _schema(cfg, header, use_propensity), extra_cols, levels)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _prop_col(cfg: SchemaConfig) -> str:
    return cfg.propensity_col or "propensity"


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: SimulateConfig, out: Path) -> None:
    sim = cfg.sim.build(cfg.seed)
    write_csv(gen_unconfounded(sim), out / "unc.csv")
    write_csv(gen_confounded(sim), out / "conf.csv")
    o = cfg.oracle
    grid = np.linspace(o.grid_min, o.grid_max, o.grid_points)
    omega = mc_true_omega(grid, o.n_mc, derive_seed(cfg.seed, 3), o.bandwidth, sim.noise_scale, sim.include_confounding)
    tau = true_tau(grid)
    _write_rows(
        out / "truth.csv",
        ["x", "true_tau", "oracle_omega", "implied_eta"],
        [[repr(float(v)) for v in row] for row in zip(grid, tau, omega, tau - omega)],
    )


def cmd_inject(cfg: InjectConfig, out: Path) -> None:
    all_rows = _load(cfg.input, cfg.schema_)
    if all_rows.propensity is not None and np.ptp(all_rows.propensity) > 0:
        raise DataError("input must be a constant-propensity RCT table; its propensity column varies")
    spec = InjectionSpec(cfg.split_col, cfg.q_prime, cfg.seed, cfg.drop_split_col, cfg.q)
    result = inject_confounding(all_rows.without_propensity(), spec)
    result.write(out, cfg.schema_.treatment_col, cfg.schema_.outcome_col, _prop_col(cfg.schema_))


def cmd_fit(cfg: FitConfig, out: Path) -> None:
    levels = categorical_levels([cfg.conf, cfg.unc], cfg.schema_.categorical_cols) or None
    conf = _load(cfg.conf, cfg.schema_, use_propensity=False, levels=levels)
    unc = _load(cfg.unc, cfg.schema_, levels=levels)
    spec = cfg.estimator.spec()
    fmap = EtaFeatureMap.parse(cfg.eta_map)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = remove_hidden_confounding(
            conf, unc, spec, fmap, seed=cfg.seed, margin=cfg.overlap_margin,
            allow_constant=cfg.allow_constant_propensity, threads=cfg.threads,
        )
    messages = [str(w.message) for w in caught]
    for m in messages:
        logger.warning("%s", m)
    estimator = {**spec.to_dict(), "eta_map": fmap.to_dict(), "categorical_levels": levels or {}}
    save_model(model, out / "model", conf.feature_names, estimator)
    corr = model.correction
    _dump_json(
        {
            "seed": cfg.seed,
            "n_conf": conf.n,
            "n_unc": unc.n,
            "feature_names": list(conf.feature_names),
            "eta_map": fmap.label,
            "parameter_names": fmap.names(list(conf.feature_names)),
            "theta": [float(v) for v in corr.theta],
            "n_params": int(corr.theta.size),
            "condition_number": float(corr.condition_number),
            "n_used": int(corr.n_used),
            "diagnostics": model.diagnostics.to_dict() if model.diagnostics else None,
            "warnings": messages,
        },
        out / "fit_report.json",
    )


def cmd_evaluate(cfg: EvaluateConfig, out: Path) -> None:
    model, names = load_model(cfg.model)
    with open(Path(cfg.model) / "model.json", encoding="utf-8") as fh:
        levels = json.load(fh).get("estimator", {}).get("categorical_levels") or None
    header, _ = read_csv_table(cfg.eval_pool)
    if cfg.y_gt_col not in header:
        raise DataError(f"{cfg.eval_pool}: missing ground-truth column {cfg.y_gt_col!r}")
    pool, extras = _load(cfg.eval_pool, cfg.schema_, use_propensity=False, extra_cols=[cfg.y_gt_col], levels=levels)
    check_features(names, pool.feature_names)
    report = evaluate_model(model, pool, extras[cfg.y_gt_col], cfg.holdout_fraction, cfg.seed, method_name="2 step")
    held, _ = split_indices(pool.n, cfg.holdout_fraction, cfg.seed)
    _dump_json({**report.to_dict(), "heldout_rows": held.tolist()}, out / "report.json")


def cmd_sweep(cfg: SweepConfig, out: Path) -> None:
    fmap = EtaFeatureMap.parse(cfg.eta_map)
    est = cfg.estimator
    if cfg.kind == "q_prime":
        all_rows = _load(cfg.input, cfg.schema_, use_propensity=False)
        template = InjectionSpec(cfg.split_col, 0.5, 0, cfg.drop_split_col, cfg.q)
        result = sweep_q_prime(
            all_rows, template, cfg.grid, cfg.reps, cfg.methods, cfg.seed, cfg.holdout_fraction,
            est.forest_params(), est.ridge_params(), fmap, threads=cfg.threads,
        )
    else:
        result = sweep_rate(
            cfg.sim.build(0), cfg.n_grid, cfg.reps, cfg.seed, cfg.oracle_omega, est.spec(), fmap,
            cfg.n_mc, threads=cfg.threads,
        )
    result.to_csv(out / "sweep.csv")
    summary = result.summary()
    _dump_json(summary, out / "summary.json")
    if summary["n_failed"]:
        logger.warning("%d of %d sweep rows failed; see the status column", summary["n_failed"], summary["n_points"])


COMMANDS = {
    "simulate": cmd_simulate,
    "inject": cmd_inject,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grounded-cate", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", help="output directory (must be empty unless --force)")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument("--threads", type=int)
        if name in ("inject", "fit", "evaluate", "sweep"):
            p.add_argument("--treatment-col")
            p.add_argument("--outcome-col")
            p.add_argument("--propensity-col")
        if name in ("inject", "sweep"):
            p.add_argument("--input", help="RCT table (CSV)")
            p.add_argument("--split-col")
        if name == "inject":
            p.add_argument("--q-prime", type=float)
        if name in ("fit", "sweep"):
            p.add_argument("--eta-map", help="identity, identity+intercept or poly:k")
            p.add_argument("--base", choices=["ridge", "forest"])
        if name == "fit":
            p.add_argument("--conf", help="confounded sample (CSV)")
            p.add_argument("--unc", help="unconfounded sample (CSV)")
        if name == "evaluate":
            p.add_argument("--model", help="model directory written by 'fit'")
            p.add_argument("--eval-pool", help="evaluation table with a ground-truth column")
        if name == "sweep":
            p.add_argument("--kind", choices=["q_prime", "rate"])
            p.add_argument("--reps", type=int)
    return parser


_FLAG_PATHS = {
    "out": "out",
    "seed": "seed",
    "threads": "threads",
    "treatment_col": "schema.treatment_col",
    "outcome_col": "schema.outcome_col",
    "propensity_col": "schema.propensity_col",
    "input": "input",
    "split_col": "split_col",
    "q_prime": "q_prime",
    "eta_map": "eta_map",
    "base": "estimator.base",
    "conf": "conf",
    "unc": "unc",
    "model": "model",
    "eval_pool": "eval_pool",
    "kind": "kind",
    "reps": "reps",
}


def _apply_flags(raw: dict, args: argparse.Namespace) -> dict:
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = raw
        *parents, leaf = path.split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise DataError(f"config key {key!r} must be an object")
        node[leaf] = value
    return raw


def resolve_config(command: str, args: argparse.Namespace):
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise DataError(f"config {args.config} must hold a JSON object")
    raw = _apply_flags(raw, args)
    cfg = CONFIGS[command].model_validate(raw)
    if cfg.seed is None:
        cfg.seed = secrets.randbelow(SEED_MAX)
        print(f"seed: {cfg.seed} (generated)", file=sys.stderr)
    if cfg.out is None:
        raise DataError("no output directory: pass --out or set 'out' in the config")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        out = _prepare_out(cfg.out, args.force)
        _dump_json(cfg.model_dump(mode="json", by_alias=True), out / "config.json")
        COMMANDS[args.command](cfg, out)
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
        return 1
    except (GroundedCateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
