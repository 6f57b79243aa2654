"""Self-describing checkpoint files.

Layout (little-endian): magic ``SSME``, u32 version (=1), u32 length of a
JSON manifest, the manifest bytes, u64 parameter count, then the parameter
tape as float64.  The manifest carries everything needed to rebuild the
model (model config, region count, target transform, split assignment,
resolved run config), so a restore is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SplitAssignment, TargetTransform
from .errors import FormatError
from .model import Model, ModelConfig, build_model
from .numcore import Rng

_MAGIC = b"SSME"
_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    transform: TargetTransform
    split: SplitAssignment
    run_config: dict


def save_checkpoint(
    path,
    model: Model,
    transform: TargetTransform,
    split: SplitAssignment,
    run_config: dict,
) -> None:
    manifest = {
        "model_config": model.config.to_dict(),
        "n_regions": model.n_regions,
        "transform": {
            "specs": list(transform.specs),
            "means": transform.means.tolist(),
            "stds": transform.stds.tolist(),
            "clamped": list(transform.clamped),
        },
        "split": {
            "train": list(split.train),
            "val": list(split.val),
            "test": list(split.test),
            "seed": split.seed,
        },
        "run_config": run_config,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    values = np.ascontiguousarray(model.tape.values, dtype="<f8")
    with open(path, "wb") as fp:
        fp.write(_MAGIC)
        fp.write(struct.pack("<II", _VERSION, len(blob)))
        fp.write(blob)
        fp.write(struct.pack("<Q", values.size))
        fp.write(values.tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IOError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, json_len = struct.unpack("<II", blob[4:12])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + json_len + 8:
        raise FormatError(f"{path}: truncated checkpoint manifest")
    try:
        manifest = json.loads(blob[12 : 12 + json_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from None
    (n_params,) = struct.unpack("<Q", blob[12 + json_len : 20 + json_len])
    values = np.frombuffer(blob[20 + json_len :], dtype="<f8")
    if values.size != n_params:
        raise FormatError(
            f"{path}: expected {n_params} parameters, found {values.size}"
        )

    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config, manifest["n_regions"], Rng(0))
    if len(model.tape) != n_params:
        raise FormatError(
            f"{path}: config implies {len(model.tape)} parameters, file has {n_params}"
        )
    model.tape.values[:] = values.astype(np.float64)

    t = manifest["transform"]
    transform = TargetTransform(
        specs=list(t["specs"]),
        means=np.array(t["means"], dtype=np.float64),
        stds=np.array(t["stds"], dtype=np.float64),
        clamped=list(t["clamped"]),
    )
    s = manifest["split"]
    split = SplitAssignment(train=s["train"], val=s["val"], test=s["test"], seed=s["seed"])
    return Checkpoint(model=model, transform=transform, split=split, run_config=manifest["run_config"])
