"""On-disk form of a fitted corrected model: a directory with three files.

``model.json`` names the covariates and the estimator, ``omega.npz`` holds
the base estimator (see :mod:`grounded_cate.learners.serialize`) and
``correction.json`` the fitted correction.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ArtifactError, DataError, SchemaMismatchError
from .grounding import CorrectedCateModel, Correction
from .learners.serialize import load_cate_model, save_cate_model

FORMAT = "grounded-cate-model"
VERSION = 1


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_model(model: CorrectedCateModel, out_dir, feature_names, estimator: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cate_model(model.omega, out / "omega.npz")
    corr = model.correction.to_json()
    corr["parameter_names"] = model.correction.feature_map.names(list(feature_names))
    _dump(corr, out / "correction.json")
    _dump(
        {
            "format": FORMAT,
            "version": VERSION,
            "feature_names": list(feature_names),
            "estimator": estimator,
            "omega": "omega.npz",
            "correction": "correction.json",
        },
        out / "model.json",
    )


def load_model(model_dir) -> tuple[CorrectedCateModel, list[str]]:
    """Load a model directory; returns the model and the covariate names it expects."""
    d = Path(model_dir)
    try:
        with open(d / "model.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise ArtifactError(f"{d}: not a version-{VERSION} {FORMAT} directory")
        with open(d / meta["correction"], encoding="utf-8") as fh:
            correction = Correction.from_json(json.load(fh))
        names = [str(n) for n in meta["feature_names"]]
    except ArtifactError:
        raise
    except (OSError, ValueError, KeyError, TypeError, DataError) as exc:
        raise ArtifactError(f"{d}: malformed model artifact ({exc})") from exc
    omega = load_cate_model(d / meta["omega"])
    if correction.input_dim != len(names):
        raise ArtifactError(f"{d}: correction expects {correction.input_dim} covariates, model lists {len(names)}")
    return CorrectedCateModel(omega, correction), names


def check_features(expected, got) -> None:
    if list(expected) != list(got):
        raise SchemaMismatchError(f"covariates {list(got)} do not match the model's {list(expected)}")
