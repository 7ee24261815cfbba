"""Versioned JSON checkpoints.

Tensors are stored as ``{"shape": [...], "data": [...]}`` with row-major
data.  Python's float repr round-trips exactly, so a saved checkpoint loads
back value-identical, and key order is fixed so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffusion import Architecture, DenoiserParams, layer_name
from ..groupsearch import GroupAssignment
from ..quantizer import LayerQuantTable

SCHEMA_VERSION = 1


class CheckpointError(Exception):
    pass


class MalformedCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    def __init__(self, found, expected=SCHEMA_VERSION):
        super().__init__(f"checkpoint schema version {found} does not match "
                         f"supported version {expected}")
        self.found = found
        self.expected = expected


class ShapeMismatch(CheckpointError):
    pass


@dataclass
class QuantBundle:
    """A quantized model: weight-quantized parameters plus activation tables."""

    params: DenoiserParams
    tables: dict[str, LayerQuantTable]
    assignment: GroupAssignment
    calib_x: np.ndarray | None = None
    calib_t: np.ndarray | None = None
    entropy: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: DenoiserParams
    config: dict
    seed: int
    bundle: QuantBundle | None = None
    extra: dict = field(default_factory=dict)


def _tensor(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _array(d: dict, what: str) -> np.ndarray:
    try:
        shape = [int(s) for s in d["shape"]]
        data = np.asarray(d["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpoint(f"{what}: bad tensor record ({exc})") from exc
    if int(np.prod(shape)) != data.size:
        raise ShapeMismatch(f"{what}: shape {shape} needs {int(np.prod(shape))} values, "
                            f"found {data.size}")
    return data.reshape(shape)


def _params_to_dict(p: DenoiserParams) -> dict:
    return {"architecture": p.arch.to_dict(),
            "tensors": {k: _tensor(v) for k, v in p.named_tensors().items()}}


def _params_from_dict(d: dict, what: str) -> DenoiserParams:
    try:
        arch = Architecture.from_dict(d["architecture"])
        tensors = d["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpoint(f"{what}: missing architecture or tensors ({exc})") from exc
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(arch.layer_shapes):
        for kind, shape, out in (("weight", (fan_in, fan_out), weights),
                                 ("bias", (fan_out,), biases)):
            key = f"{layer_name(i)}.{kind}"
            if key not in tensors:
                raise MalformedCheckpoint(f"{what}: missing tensor {key}")
            arr = _array(tensors[key], key)
            if arr.shape != shape:
                raise ShapeMismatch(f"{what}: {key} has shape {arr.shape}, "
                                    f"architecture needs {shape}")
            out.append(arr)
    return DenoiserParams(arch, weights, biases)


def _bundle_to_dict(b: QuantBundle) -> dict:
    out = {"params": _params_to_dict(b.params),
           "tables": [b.tables[k].to_dict() for k in sorted(b.tables)],
           "assignment": b.assignment.to_list(),
           "entropy": b.entropy,
           "config": b.config}
    if b.calib_x is not None:
        out["calibration_set"] = {"x": _tensor(b.calib_x),
                                  "t": [int(t) for t in b.calib_t]}
    return out


def _bundle_from_dict(d: dict) -> QuantBundle:
    try:
        tables = {t["layer"]: LayerQuantTable.from_dict(t) for t in d["tables"]}
        assignment = GroupAssignment(np.asarray(d["assignment"], dtype=np.int64))
        calib = d.get("calibration_set")
        calib_x = _array(calib["x"], "calibration_set.x") if calib else None
        calib_t = np.asarray(calib["t"], dtype=np.int64) if calib else None
        params = _params_from_dict(d["params"], "quantized params")
        return QuantBundle(params, tables, assignment, calib_x, calib_t,
                           list(d.get("entropy", [])), dict(d.get("config", {})))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpoint(f"quantized bundle: {exc}") from exc


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    doc = {"schema_version": SCHEMA_VERSION,
           "seed": int(ckpt.seed),
           "config": ckpt.config,
           "model": _params_to_dict(ckpt.params),
           "quantized": _bundle_to_dict(ckpt.bundle) if ckpt.bundle is not None else None,
           "extra": ckpt.extra}
    return json.dumps(doc, sort_keys=True, allow_nan=False)


def checkpoint_from_json(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCheckpoint(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise MalformedCheckpoint("missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise VersionMismatch(doc["schema_version"])
    try:
        params = _params_from_dict(doc["model"], "model")
        bundle = _bundle_from_dict(doc["quantized"]) if doc.get("quantized") else None
        return Checkpoint(params, dict(doc["config"]), int(doc["seed"]), bundle,
                          dict(doc.get("extra") or {}))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpoint(str(exc)) from exc


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(checkpoint_to_json(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    return checkpoint_from_json(text)
