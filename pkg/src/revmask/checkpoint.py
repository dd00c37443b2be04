"""Checkpoint directories: ``manifest.txt`` + ``tensors.bin`` + ``config.txt``.

The manifest starts with ``# key value`` metadata lines followed by one line
per tensor::

    <name> float32 <d0>x<d1>x... <byte offset>

``tensors.bin`` concatenates the tensors as little-endian float32 in
manifest order. Optimizer moments are stored as ``opt.m.<param>`` and
``opt.v.<param>``; the Adam step count lives in the metadata.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import AdamState

MANIFEST = "manifest.txt"
BLOB = "tensors.bin"
CONFIG = "config.txt"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    directory: str | Path,
    arrays: Mapping[str, np.ndarray],
    meta: Mapping[str, object] | None = None,
    config_text: str | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k} {v}" for k, v in (meta or {}).items()]
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 tensors can be saved, got {arr.dtype}")
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        data = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} float32 {shape} {offset}")
        chunks.append(data)
        offset += len(data)
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    if config_text is not None:
        (directory / CONFIG).write_text(config_text)
    return directory


def load_checkpoint(directory: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    blob = (directory / BLOB).read_bytes()
    meta: dict[str, str] = {}
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("# "):
            k, _, v = line[2:].partition(" ")
            meta[k] = v
            continue
        parts = line.split()
        if len(parts) != 4 or parts[1] != "float32":
            raise CheckpointError(f"{manifest}:{no}: malformed entry {line!r}")
        name, _, shape_s, off_s = parts
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        offset = int(off_s)
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{name}: blob truncated ({len(blob)} bytes, need {end})")
        arrays[name] = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset).astype(np.float32).reshape(shape)
    return arrays, meta


def read_config_text(directory: str | Path) -> str:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    return (directory / CONFIG).read_text()


def optimizer_arrays(state: AdamState) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name in state.m:
        out[f"opt.m.{name}"] = state.m[name]
        out[f"opt.v.{name}"] = state.v[name]
    return out


def split_optimizer(arrays: Mapping[str, np.ndarray], step: int) -> tuple[dict[str, np.ndarray], AdamState]:
    """Separate ``opt.*`` entries from model tensors."""
    model = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    state = AdamState(step=step)
    for k, v in arrays.items():
        if k.startswith("opt.m."):
            state.m[k[6:]] = v.copy()
        elif k.startswith("opt.v."):
            state.v[k[6:]] = v.copy()
    return model, state
