"""Binary tensor container and checkpoint directories.

Container layout (all integers little-endian)::

    b"TAN1"            magic
    uint8              element precision tag: 4 = float32, 8 = float64
    uint64             rank
    uint64 * rank      extents
    payload            row-major elements

A checkpoint is a directory holding ``manifest.json`` plus one ``.tan`` file
per parameter, listed in layer order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .lcn import LcnModel
from .tan import TanConfig, TanModel, config_dict
from .tensor import Tensor

MAGIC = b"TAN1"
CHECKPOINT_VERSION = 1
_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def dumps_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise FormatError(f"only float32/float64 tensors are supported, got {arr.dtype}")
    tag = arr.dtype.itemsize
    head = MAGIC + struct.pack("<BQ", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()


def loads_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic; not a TAN1 tensor container")
    tag, rank = struct.unpack_from("<BQ", buf, 4)
    if tag not in _TAGS:
        raise FormatError(f"unknown precision tag {tag}")
    off = 4 + struct.calcsize("<BQ")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = _TAGS[tag]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != n * dtype.itemsize:
        raise FormatError(f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())


def _save_params(d: Path, params: dict[str, Tensor], manifest: dict) -> Path:
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for name, t in params.items():
        fname = f"{name}.tan"
        save_tensor(d / fname, t.data)
        files.append({"name": name, "file": fname, "shape": list(t.shape)})
    manifest = {"version": CHECKPOINT_VERSION, **manifest, "params": files}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def _load_params(d: Path, kind: str) -> tuple[dict, dict[str, Tensor]]:
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')}")
    if manifest.get("kind") != kind:
        raise FormatError(f"{d} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    params = {}
    for entry in manifest["params"]:
        arr = load_tensor(d / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{entry['file']}: shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    return manifest, params


def save_lcn(model: LcnModel, path, extra: dict | None = None) -> Path:
    manifest = {
        "kind": "lcn",
        "in_channels": model.in_channels,
        "clamp_output": model.clamp_output,
        "layers": [n.split(".")[0] for n in model.params][::2],
        **(extra or {}),
    }
    return _save_params(Path(path), model.params, manifest)


def load_lcn(path) -> LcnModel:
    manifest, params = _load_params(Path(path), "lcn")
    return LcnModel(params, manifest["in_channels"], manifest.get("clamp_output", False))


def save_tan(model: TanModel, path, extra: dict | None = None) -> Path:
    manifest = {"kind": "tan", "config": config_dict(model.cfg), **(extra or {})}
    return _save_params(Path(path), model.params, manifest)


def load_tan(path) -> TanModel:
    manifest, params = _load_params(Path(path), "tan")
    cfg = dict(manifest["config"])
    cfg.pop("dilations", None)
    return TanModel(params, TanConfig(**cfg))
