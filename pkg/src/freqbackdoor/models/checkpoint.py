"""Binary model checkpoints: b"SBKM", u32 version, u32-length-prefixed JSON spec, float32 parameters."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .classifier import Classifier, ClassifierSpec

MODEL_MAGIC = b"SBKM"
MODEL_VERSION = 1


def save_model(path, model: Classifier) -> Path:
    meta = {"spec": model.spec.to_dict(), "n_params": model.n_params}
    if model.gate is not None and not model.gate.all():
        meta["gate"] = model.gate.astype(int).tolist()
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(head)) + head)
        fh.write(model.params.astype("<f4").tobytes())
    return path


def load_model(path) -> Classifier:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12:12 + n].decode("utf-8"))
    count = int(meta["n_params"])
    if len(raw) - 12 - n != 4 * count:
        raise ValueError(f"{path}: expected {count} parameters, file holds {(len(raw) - 12 - n) // 4}")
    params = np.frombuffer(raw, dtype="<f4", count=count, offset=12 + n).astype(np.float64)
    model = Classifier(ClassifierSpec.from_dict(meta["spec"]), params)
    if "gate" in meta:
        model.set_gate(np.asarray(meta["gate"], dtype=np.float64))
    return model
