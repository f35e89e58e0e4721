"""Self-describing model checkpoints with byte-exact round-trips.

A checkpoint is a single JSON document: format version, the full model
configuration, the number of event types, and every named tensor with its
shape and flat float64 values.  Python's shortest-repr float serialization
makes save -> load -> save reproduce the file bytes exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor
from .encoder import ModelConfig
from .recurrence import ModelParams, build_model

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, mismatched, or corrupt checkpoint."""


def save_checkpoint(path, params: ModelParams) -> None:
    doc = {
        "format": "tppkit-checkpoint",
        "format_version": FORMAT_VERSION,
        "num_types": params.num_types,
        "model_config": params.config.to_dict(),
        "tensors": [
            {
                "name": name,
                "shape": list(t.shape),
                "data": t.data.reshape(-1).tolist(),
            }
            for name, t in params.tensors.items()
        ],
    }
    for entry in doc["tensors"]:
        if not all(np.isfinite(v) for v in entry["data"]):
            raise CheckpointError(f"tensor '{entry['name']}' has non-finite values")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: not a checkpoint file ({err.msg})") from None
    if doc.get("format") != "tppkit-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {doc.get('format_version')} "
            f"!= supported {FORMAT_VERSION}")

    config = ModelConfig.from_dict(doc["model_config"])
    num_types = int(doc["num_types"])

    # validate the tensor table against a freshly built skeleton
    skeleton = build_model(config, num_types, seed=0)
    expected = {name: t.shape for name, t in skeleton.tensors.items()}
    got = {e["name"]: tuple(e["shape"]) for e in doc["tensors"]}
    if expected.keys() != got.keys():
        missing = sorted(expected.keys() - got.keys())
        extra = sorted(got.keys() - expected.keys())
        raise CheckpointError(
            f"{path}: tensor names do not match the config "
            f"(missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(shape) != got[name]:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {got[name]}, expected {tuple(shape)}")

    tensors = {}
    for entry in doc["tensors"]:
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        trainable = entry["name"] != "intensity.alpha" or config.alpha_trainable
        tensors[entry["name"]] = Tensor(arr, trainable)
    return ModelParams(config, num_types, tensors)
