"""Single-file JSON checkpoints for a trained DPS model and its samplers.

Arrays are stored as nested lists of Python floats. ``repr`` of a float
round-trips exactly, so a reload is bit-identical.
"""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .fusion_model import DpsModel
from .gas import GasModel
from .tds import DecayRates

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def profile_for_dtype(dtype: str) -> str:
    """The autodiff profile whose default dtype matches a stored model."""
    for name, (dt, _) in ad.PROFILES.items():
        if np.dtype(dt) == np.dtype(dtype):
            return name
    raise CheckpointError(f"no profile stores parameters as {dtype}")


def _pack(state: dict[str, np.ndarray]) -> dict:
    return {k: {"dtype": str(np.asarray(v).dtype), "shape": list(np.shape(v)), "data": np.asarray(v).tolist()}
            for k, v in state.items()}


def _unpack(blob: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, v in blob.items():
        arr = np.asarray(v["data"], dtype=v["dtype"])
        if list(arr.shape) != v["shape"]:
            arr = arr.reshape(v["shape"])
        out[k] = arr
    return out


def save_checkpoint(path, model: DpsModel, rates: DecayRates | None = None, gas: GasModel | None = None,
                    *, config: dict | None = None, dataset_fingerprint: str = "") -> Path:
    from . import __version__

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "hyperparameters": model.hyper,
        "config": config or {},
        "dataset_fingerprint": dataset_fingerprint,
        "dtype": str(model.node_table.dtype),
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    doc = {"manifest": manifest, "model": _pack(model.state_dict())}
    if gas is not None:
        doc["gas"] = {"hyper": gas.hyper, "state": _pack(gas.state_dict())}
    if rates is not None:
        doc["rates"] = _pack(rates.to_params())
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path, *, expect_fingerprint: str | None = None):
    """Returns ``(model, rates, gas, manifest)``; missing samplers come back as None."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    manifest = doc.get("manifest", {})
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if expect_fingerprint and manifest.get("dataset_fingerprint") not in ("", expect_fingerprint):
        raise CheckpointError("checkpoint was trained on a different dataset (fingerprint mismatch)")
    hyper = dict(manifest["hyperparameters"])
    num_nodes = hyper.pop("num_nodes")
    feature_dim = hyper.pop("feature_dim")
    with ad.use_profile(profile_for_dtype(manifest.get("dtype", "float32"))):
        model = DpsModel(num_nodes, feature_dim, **hyper)
        model.load_state_dict(_unpack(doc["model"]))
        gas = None
        if "gas" in doc:
            gh = doc["gas"]["hyper"]
            gas = GasModel(gh["num_nodes"], gh["feature_dim"], gh["d_node"], gh["d_time"], seed=gh.get("seed", 0))
            gas.load_state_dict(_unpack(doc["gas"]["state"]))
    rates = DecayRates.from_params(_unpack(doc["rates"])) if "rates" in doc else None
    return model, rates, gas, manifest
