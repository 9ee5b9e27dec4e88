"""Tabular study samples: representation, CSV round-tripping, encoding, splits.

A :class:`Dataset` holds one study (observational or experimental). Arrays
are copied on construction and frozen, so instances can be shared freely.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, SchemaMismatchError, SplitError

logger = logging.getLogger(__name__)

DEFAULT_TREATMENT_COL = "t"
DEFAULT_OUTCOME_COL = "y"
DEFAULT_PROPENSITY_COL = "propensity"


def _frozen(a, dtype):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """One study sample: covariates, binary treatment, outcome, optional propensity."""

    features: np.ndarray
    feature_names: tuple[str, ...]
    treatment: np.ndarray
    outcome: np.ndarray
    propensity: np.ndarray | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {features.shape}")
        n, d = features.shape
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != d:
            raise DataError(f"{len(names)} feature names for {d} feature columns")
        if len(set(names)) != d:
            dupes = sorted({s for s in names if names.count(s) > 1})
            raise DataError(f"duplicate feature names: {dupes}")
        if n < 1:
            raise DataError("dataset has no rows")
        treatment = np.asarray(self.treatment)
        outcome = np.asarray(self.outcome, dtype=np.float64)
        if treatment.shape != (n,) or outcome.shape != (n,):
            raise DataError(
                f"column lengths differ: features {n}, treatment {treatment.shape}, "
                f"outcome {outcome.shape}"
            )
        bad = np.flatnonzero((treatment != 0) & (treatment != 1))
        if bad.size:
            raise DataError(f"row {bad[0]}: treatment must be 0 or 1, got {treatment[bad[0]]!r}")
        if not np.all(np.isfinite(features)):
            r, c = np.argwhere(~np.isfinite(features))[0]
            raise DataError(f"row {r}, column {names[c]!r}: non-finite feature value")
        if not np.all(np.isfinite(outcome)):
            raise DataError(f"row {np.flatnonzero(~np.isfinite(outcome))[0]}: non-finite outcome")
        propensity = self.propensity
        if propensity is not None:
            propensity = np.asarray(propensity, dtype=np.float64)
            if propensity.shape != (n,):
                raise DataError(f"propensity has shape {propensity.shape}, expected ({n},)")
            bad = np.flatnonzero(~((propensity > 0.0) & (propensity < 1.0)))
            if bad.size:
                raise DataError(
                    f"row {bad[0]}: propensity must lie strictly in (0, 1), got {propensity[bad[0]]!r}"
                )
            propensity = _frozen(propensity, np.float64)
        object.__setattr__(self, "features", _frozen(features, np.float64))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "treatment", _frozen(treatment, np.int64))
        object.__setattr__(self, "outcome", _frozen(outcome, np.float64))
        object.__setattr__(self, "propensity", propensity)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(
            self.features[rows],
            self.feature_names,
            self.treatment[rows],
            self.outcome[rows],
            None if self.propensity is None else self.propensity[rows],
        )

    def with_propensity(self, propensity) -> "Dataset":
        if np.isscalar(propensity):
            propensity = np.full(self.n, float(propensity))
        return Dataset(self.features, self.feature_names, self.treatment, self.outcome, propensity)

    def without_propensity(self) -> "Dataset":
        return Dataset(self.features, self.feature_names, self.treatment, self.outcome)

    def drop_features(self, names: Iterable[str]) -> "Dataset":
        names = set(names)
        missing = names - set(self.feature_names)
        if missing:
            raise DataError(f"cannot drop unknown features {sorted(missing)}")
        keep = [j for j, s in enumerate(self.feature_names) if s not in names]
        return Dataset(
            self.features[:, keep],
            tuple(self.feature_names[j] for j in keep),
            self.treatment,
            self.outcome,
            self.propensity,
        )

    def column(self, name: str) -> np.ndarray:
        try:
            return self.features[:, self.feature_names.index(name)]
        except ValueError:
            raise DataError(f"no feature named {name!r}") from None

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of every field."""
        if self.feature_names != other.feature_names:
            return False
        if (self.propensity is None) != (other.propensity is None):
            return False
        pairs = [
            (self.features, other.features),
            (self.treatment, other.treatment),
            (self.outcome, other.outcome),
        ]
        if self.propensity is not None:
            pairs.append((self.propensity, other.propensity))
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


@dataclass(frozen=True)
class ColumnSchema:
    """How to map CSV columns onto a :class:`Dataset`.

    ``drop_first`` switches categorical encoding to reference-level drop, for
    unregularized least-squares contexts where full one-hot is collinear with
    an intercept.
    """

    treatment_col: str = DEFAULT_TREATMENT_COL
    outcome_col: str = DEFAULT_OUTCOME_COL
    propensity_col: str | None = None
    categorical_cols: tuple[str, ...] = ()
    drop_cols: tuple[str, ...] = ()
    drop_first: bool = False

    def __post_init__(self):
        object.__setattr__(self, "categorical_cols", tuple(self.categorical_cols))
        object.__setattr__(self, "drop_cols", tuple(self.drop_cols))
        if self.treatment_col == self.outcome_col:
            raise DataError("treatment_col and outcome_col must differ")
        special = {self.treatment_col, self.outcome_col, self.propensity_col} - {None}
        clash = special & (set(self.categorical_cols) | set(self.drop_cols))
        if clash:
            raise DataError(f"columns {sorted(clash)} cannot be both special and categorical/dropped")

    def required(self) -> list[str]:
        cols = [self.treatment_col, self.outcome_col]
        if self.propensity_col is not None:
            cols.append(self.propensity_col)
        return cols + list(self.categorical_cols) + list(self.drop_cols)


def one_hot_encode(
    values: Sequence[str],
    drop_first: bool = False,
    levels: Sequence[str] | None = None,
    prefix: str | None = None,
) -> tuple[np.ndarray, list[str]]:
    """Indicator columns for a categorical variable.

    Levels are sorted lexicographically unless ``levels`` is supplied (the
    prediction-time case), in which case values outside ``levels`` encode as
    an all-zero row and a warning is logged.

    Returns
    -------
    matrix : ndarray of shape (n, k)
    names : list of k column names, ``"prefix=level"`` when a prefix is given
    """
    values = [str(v) for v in values]
    if not values:
        raise DataError("cannot encode an empty column")
    all_levels = sorted(set(values)) if levels is None else [str(s) for s in levels]
    levels = all_levels[1:] if drop_first else all_levels
    index = {lvl: j for j, lvl in enumerate(levels)}
    out = np.zeros((len(values), len(levels)))
    for i, v in enumerate(values):
        j = index.get(v)
        if j is not None:
            out[i, j] = 1.0
    known = set(all_levels)
    unseen = sum(1 for v in values if v not in known)
    if unseen:
        logger.warning("%d value(s) with unseen level encoded as all zeros (%s)", unseen, prefix)
    names = [f"{prefix}={lvl}" if prefix else lvl for lvl in levels]
    return out, names


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: missing or non-finite value {cell!r}")
    return value


def categorical_levels(paths, columns: Sequence[str]) -> dict[str, list[str]]:
    """Sorted union of the levels each categorical column takes across several CSV files."""
    found: dict[str, set] = {c: set() for c in columns}
    for path in paths:
        header, rows = read_csv_table(path)
        for c in columns:
            if c not in header:
                raise DataError(f"{path}: missing column {c!r}")
            j = header.index(c)
            found[c].update(r[j].strip() for r in rows)
    return {c: sorted(v) for c, v in found.items()}


def read_csv_table(path) -> tuple[list[str], list[list[str]]]:
    """Header and raw string rows of a CSV file."""
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {lineno} has {len(row)} cells, header has {len(header)}"
                )
            rows.append(row)
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    return header, rows


def load_csv(
    path,
    schema: ColumnSchema = ColumnSchema(),
    extra_cols: Sequence[str] = (),
    levels: dict[str, Sequence[str]] | None = None,
):
    """Parse a CSV file into a :class:`Dataset`.

    Numeric cells must be finite decimals; there is no imputation. Rows are
    numbered from 1 (the first row after the header) in error messages.
    Columns named in ``extra_cols`` are parsed as numbers and returned
    separately instead of becoming features; when ``extra_cols`` is given
    the return value is ``(dataset, {name: array})``. ``levels`` fixes the
    category list of categorical columns, so that separate files share one
    encoding.
    """
    header, rows = read_csv_table(path)
    missing = [c for c in list(schema.required()) + list(extra_cols) if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    col = {h: j for j, h in enumerate(header)}

    def numeric(name):
        j = col[name]
        return np.array([_parse_float(r[j].strip(), i, name) for i, r in enumerate(rows, 1)])

    treatment = numeric(schema.treatment_col)
    bad = np.flatnonzero((treatment != 0.0) & (treatment != 1.0))
    if bad.size:
        raise DataError(
            f"{path}: row {bad[0] + 1}, column {schema.treatment_col!r}: treatment must be 0 or 1, "
            f"got {rows[bad[0]][col[schema.treatment_col]]!r}"
        )
    outcome = numeric(schema.outcome_col)
    propensity = numeric(schema.propensity_col) if schema.propensity_col else None
    extras = {name: numeric(name) for name in extra_cols}

    skip = set(schema.required()) - set(schema.categorical_cols) | set(extra_cols)
    blocks, names = [], []
    for h in header:
        if h in skip:
            continue
        if h in schema.categorical_cols:
            j = col[h]
            mat, cols = one_hot_encode(
                [r[j].strip() for r in rows],
                drop_first=schema.drop_first,
                levels=(levels or {}).get(h),
                prefix=h,
            )
            blocks.append(mat)
            names.extend(cols)
        else:
            blocks.append(numeric(h).reshape(-1, 1))
            names.append(h)
    features = np.hstack(blocks) if blocks else np.empty((len(rows), 0))
    try:
        ds = Dataset(features, tuple(names), treatment.astype(np.int64), outcome, propensity)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    if extra_cols:
        return ds, extras
    return ds


def _fmt(v) -> str:
    return repr(float(v))


def write_csv(
    ds: Dataset,
    path,
    treatment_col: str = DEFAULT_TREATMENT_COL,
    outcome_col: str = DEFAULT_OUTCOME_COL,
    propensity_col: str = DEFAULT_PROPENSITY_COL,
    extra_columns: dict[str, np.ndarray] | None = None,
) -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces it bit for bit.

    Floats are written with ``repr``, the shortest string that round-trips.
    """
    extra_columns = dict(extra_columns or {})
    header = list(ds.feature_names) + [treatment_col, outcome_col]
    if ds.propensity is not None:
        header.append(propensity_col)
    header.extend(extra_columns)
    if len(set(header)) != len(header):
        raise DataError(f"output column names collide: {header}")
    for name, values in extra_columns.items():
        if np.shape(values) != (ds.n,):
            raise DataError(f"extra column {name!r} has the wrong length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [_fmt(v) for v in ds.features[i]]
            row.append(str(int(ds.treatment[i])))
            row.append(_fmt(ds.outcome[i]))
            if ds.propensity is not None:
                row.append(_fmt(ds.propensity[i]))
            row.extend(_fmt(values[i]) for values in extra_columns.values())
            w.writerow(row)


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero (0.5 -> 1, -0.5 -> -1)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint partition of ``range(n)``; each part sorted ascending."""
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    k = round_half_away(fraction * n)
    if k < 1 or k > n - 1:
        raise SplitError(f"splitting {n} rows at fraction {fraction} leaves a side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random two-way row split; the first part has ``round(fraction * n)`` rows."""
    first, second = split_indices(ds.n, fraction, seed)
    return ds.take(first), ds.take(second)


@dataclass(frozen=True)
class PairDiagnostics:
    feature_names: tuple[str, ...]
    unc_has_propensity: bool
    coverage_fraction: float
    coverage_radius: float
    standardized_features: tuple[str, ...] = field(default=())

    @property
    def constant_propensity_fallback(self) -> bool:
        return not self.unc_has_propensity

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "unc_has_propensity": self.unc_has_propensity,
            "constant_propensity_fallback": self.constant_propensity_fallback,
            "coverage_fraction": self.coverage_fraction,
            "coverage_radius": self.coverage_radius,
            "standardized_features": list(self.standardized_features),
        }


def coverage(conf_x: np.ndarray, unc_x: np.ndarray) -> tuple[float, float, list[int]]:
    """Fraction of experimental rows lying near the observational sample.

    Features are z-scored with observational statistics (zero-variance
    features dropped). A row counts as covered when its nearest
    observational neighbour is no further than the median
    nearest-neighbour distance within the observational sample itself.
    """
    mean = conf_x.mean(axis=0)
    sd = conf_x.std(axis=0)
    keep = [j for j in range(conf_x.shape[1]) if sd[j] > 0.0]
    if not keep or conf_x.shape[0] < 2:
        return 1.0, 0.0, keep
    zc = (conf_x[:, keep] - mean[keep]) / sd[keep]
    zu = (unc_x[:, keep] - mean[keep]) / sd[keep]
    tree = cKDTree(zc)
    radius = float(np.median(tree.query(zc, k=2)[0][:, 1]))
    dist = tree.query(zu, k=1)[0]
    return float(np.mean(dist <= radius)), radius, keep


def validate_pair(conf: Dataset, unc: Dataset) -> PairDiagnostics:
    """Check that an observational and an experimental sample can be combined.

    Raises :class:`SchemaMismatchError` when feature names or their order
    differ. A missing experimental propensity is not an error; it is
    reported so callers can fall back to a constant propensity.
    """
    if conf.feature_names != unc.feature_names:
        only_conf = [s for s in conf.feature_names if s not in unc.feature_names]
        only_unc = [s for s in unc.feature_names if s not in conf.feature_names]
        raise SchemaMismatchError(
            "feature columns differ between samples: "
            f"only in confounded {only_conf}, only in unconfounded {only_unc}"
            + ("" if only_conf or only_unc else " (order differs)")
        )
    frac, radius, keep = coverage(conf.features, unc.features)
    return PairDiagnostics(
        feature_names=conf.feature_names,
        unc_has_propensity=unc.propensity is not None,
        coverage_fraction=frac,
        coverage_radius=radius,
        standardized_features=tuple(conf.feature_names[j] for j in keep),
    )
