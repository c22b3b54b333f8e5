"""Binary tensor container, JSON sidecars, checkpoints and CSV tables.

Container layout: magic ``b"ZTEN1"``, u8 dtype code (0 = float32,
1 = float64), u8 rank, ``rank`` little-endian u64 dimensions, then the
little-endian data in C order.  Metadata lives in ``<file>.json``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import LayoutError, MissingArtifactError

MAGIC = b"ZTEN1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_tensor(path, array, meta=None):
    arr = np.asarray(array)
    if arr.dtype not in CODES:
        arr = arr.astype(np.float64)
    code = CODES[arr.dtype]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    if meta is not None:
        write_json(_sidecar(path), meta)
    return path


def read_tensor(path, with_meta=False):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing tensor file {path}")
    raw = path.read_bytes()
    if raw[:5] != MAGIC or len(raw) < 7:
        raise LayoutError(f"{path} is not a tensor container")
    code, rank = struct.unpack_from("<BB", raw, 5)
    if code not in DTYPES:
        raise LayoutError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", raw, 7)
    offset = 7 + 8 * rank
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise LayoutError(f"{path}: payload holds {len(raw) - offset} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape).copy()
    if not with_meta:
        return arr
    side = _sidecar(path)
    return arr, (read_json(side) if side.exists() else {})


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing file {path}")
    return json.loads(path.read_text())


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_module(directory, module, meta):
    """Write every parameter and buffer as a float32 container plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for name, value in module.state_dict().items():
        if not value.is_floating_point():
            continue
        write_tensor(directory / f"{name}.zten", value.detach().cpu().numpy().astype(np.float32))
        names.append(dict(name=name, shape=list(value.shape)))
    manifest = dict(meta, tensors=names)
    write_json(directory / "manifest.json", manifest)
    return manifest


def load_manifest(directory):
    return read_json(Path(directory) / "manifest.json")


def load_module(directory, module):
    """Fill ``module`` from a checkpoint directory; shapes must match the manifest."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    state = module.state_dict()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in state:
            raise LayoutError(f"checkpoint tensor {name!r} has no counterpart in the model")
        arr = read_tensor(directory / f"{name}.zten")
        if tuple(arr.shape) != tuple(state[name].shape):
            raise LayoutError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(state[name].shape)}")
        state[name] = torch.as_tensor(arr, dtype=state[name].dtype)
    module.load_state_dict(state)
    return manifest


def write_csv(path, rows, header=None):
    """Write dict rows (header from the first row) or plain sequences with ``header``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows and isinstance(rows[0], dict):
            writer = csv.DictWriter(fh, fieldnames=header or list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        else:
            writer = csv.writer(fh)
            if header:
                writer.writerow(header)
            writer.writerows(rows)
    return path


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
