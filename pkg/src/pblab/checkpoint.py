"""Binary checkpoint format shared by clean and poisoned models.

Layout::

    PBCK1\\n
    arch <json model config>\\n
    <name> <shape> <offset> <length>\\n   (one line per tensor)
    \\n
    <payload: little-endian float32, tensors at the declared byte offsets>

``shape`` is dimensions joined by ``x``; offsets are relative to the start of
the payload. Models with LoRA adapters are saved with the adapters merged.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .models import CausalLMModel, ClassifierModel, Model, ModelConfig, merge_lora

MAGIC = b"PBCK1\n"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


def _shape_str(shape) -> str:
    return "x".join(str(int(s)) for s in shape) or "1"


def save_checkpoint(model: Model, path) -> Path:
    if model.adapters:
        model = merge_lora(model.clone())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC, b"arch " + json.dumps(model.config.to_dict(), sort_keys=True).encode() + b"\n"]
    payload = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        lines.append(f"{name} {_shape_str(p.shape)} {offset} {len(raw)}\n".encode())
        payload.append(raw)
        offset += len(raw)
    lines.append(b"\n")
    path.write_bytes(b"".join(lines) + b"".join(payload))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its architecture dict and named arrays."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise BadMagicError(f"bad magic {blob[:len(MAGIC)]!r}; expected {MAGIC!r}")
    pos = len(MAGIC)
    end = blob.find(b"\n\n", pos - 1)
    if end < 0:
        raise TruncatedError("manifest is not terminated by a blank line")
    header = blob[pos:end].decode().split("\n")
    payload = blob[end + 2 :]
    if not header or not header[0].startswith("arch "):
        raise ManifestError("missing arch line")
    arch = json.loads(header[0][5:])
    tensors: dict[str, np.ndarray] = {}
    covered = 0
    for line in header[1:]:
        parts = line.split(" ")
        if len(parts) != 4:
            raise ManifestError(f"malformed manifest line {line!r}")
        name, shape_s, off_s, len_s = parts
        shape = tuple(int(s) for s in shape_s.split("x"))
        offset, length = int(off_s), int(len_s)
        if length != 4 * int(np.prod(shape)):
            raise ManifestError(f"{name}: length {length} does not match shape {shape_s}")
        if offset != covered:
            raise ManifestError(f"{name}: offset {offset}, expected {covered}")
        if offset + length > len(payload):
            raise TruncatedError(f"{name}: declares bytes up to {offset + length}, payload has {len(payload)}")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=offset).reshape(shape).astype(np.float32)
        covered += length
    if covered != len(payload):
        raise ManifestError(f"payload has {len(payload) - covered} undeclared trailing bytes")
    return arch, tensors


def load_checkpoint(path) -> Model:
    arch, tensors = read_checkpoint(path)
    config = ModelConfig(**arch)
    cls = ClassifierModel if config.kind == "classifier" else CausalLMModel
    model = cls.init(config)
    if set(tensors) != set(model.params):
        raise ManifestError(f"tensor names do not match a {config.kind} model")
    for name, arr in tensors.items():
        if model.params[name].shape != arr.shape and not (arr.shape == (1,) and model.params[name].data.size == 1):
            raise ManifestError(f"{name}: shape {arr.shape} does not match architecture {model.params[name].shape}")
        model.params[name].data = arr.reshape(model.params[name].shape).copy()
    return model
