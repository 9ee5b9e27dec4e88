"""Save and load fitted CATE models as ``.npz`` archives with a JSON manifest.

Archives are written with fixed zip timestamps so that refitting with the
same seed reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from ..errors import ArtifactError
from .cate import DifferenceModel, PseudoOutcomeModel
from .forest import ForestModel, ForestParams, RegressionTree
from .ridge import LinearModel

_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "n_samples")
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _pack_regressor(model, prefix: str, arrays: dict) -> dict:
    if isinstance(model, LinearModel):
        arrays[prefix + "coef"] = model.coefficients
        return {"type": "linear", "intercept": model.intercept, "lambda": model.lambda_used}
    if isinstance(model, ForestModel):
        sizes = np.array([t.n_nodes for t in model.trees], dtype=np.int64)
        arrays[prefix + "offsets"] = np.concatenate([[0], np.cumsum(sizes)])
        for name in _TREE_FIELDS:
            arrays[prefix + name] = np.concatenate([getattr(t, name) for t in model.trees])
        return {"type": "forest", "params": model.params.to_dict(), "n_features": model.n_features}
    raise ArtifactError(f"cannot serialize regressor of type {type(model).__name__}")


def _unpack_regressor(meta: dict, prefix: str, arrays) -> LinearModel | ForestModel:
    kind = meta.get("type")
    if kind == "linear":
        return LinearModel(arrays[prefix + "coef"], meta["intercept"], meta["lambda"])
    if kind == "forest":
        offsets = arrays[prefix + "offsets"]
        cols = {name: arrays[prefix + name] for name in _TREE_FIELDS}
        trees = []
        for a, b in zip(offsets[:-1], offsets[1:]):
            trees.append(RegressionTree(*(np.array(cols[name][a:b]) for name in _TREE_FIELDS)))
        return ForestModel(tuple(trees), ForestParams(**meta["params"]), int(meta["n_features"]))
    raise ArtifactError(f"unknown regressor type {kind!r}")


def pack_cate_model(model) -> tuple[dict, dict]:
    arrays: dict = {}
    if isinstance(model, DifferenceModel):
        meta = {
            "type": "difference",
            "treated": _pack_regressor(model.treated, "treated/", arrays),
            "control": _pack_regressor(model.control, "control/", arrays),
        }
    elif isinstance(model, PseudoOutcomeModel):
        meta = {"type": "pseudo_outcome", "regressor": _pack_regressor(model.regressor, "reg/", arrays)}
    else:
        raise ArtifactError(f"cannot serialize CATE model of type {type(model).__name__}")
    return meta, arrays


def unpack_cate_model(meta: dict, arrays):
    kind = meta.get("type")
    if kind == "difference":
        return DifferenceModel(
            _unpack_regressor(meta["treated"], "treated/", arrays),
            _unpack_regressor(meta["control"], "control/", arrays),
        )
    if kind == "pseudo_outcome":
        return PseudoOutcomeModel(_unpack_regressor(meta["regressor"], "reg/", arrays))
    raise ArtifactError(f"unknown CATE model type {kind!r}")


def write_npz(path, arrays: dict) -> None:
    """Deterministic replacement for ``np.savez``."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_cate_model(model, path) -> None:
    meta, arrays = pack_cate_model(model)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def load_cate_model(path):
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
        return unpack_cate_model(meta, arrays)
    except ArtifactError:
        raise
    except (OSError, ValueError, KeyError, TypeError, zipfile.BadZipFile) as exc:
        raise ArtifactError(f"{path}: malformed model archive ({exc})") from exc
