"""Manifest + raw blob directory format used for rigs, checkpoints and avatars.

Layout of a container directory::

    manifest.json        UTF-8 JSON
    <name>.bin           one file per array, raw little-endian, C order

``manifest.json`` has the keys ``format`` (``"handavatar-arrays"``),
``version`` (1), ``kind`` (free-form tag such as ``"rig"``), ``meta``
(JSON object) and ``arrays``, mapping each array name to
``{"file": str, "dtype": "float32" | "uint32", "shape": [int, ...]}``.
Float data is stored as IEEE-754 binary32 (``<f4``) and integer data as
unsigned 32-bit (``<u4``); there is no header or padding inside blob files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "handavatar-arrays"
VERSION = 1
_DTYPES = {"float32": "<f4", "uint32": "<u4"}


class ContainerError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict | None = None, kind: str = "") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub":
            if arr.size and arr.min() < 0:
                raise ContainerError(f"array {name!r} has negative integers")
            dtype = "uint32"
        else:
            dtype = "float32"
        fname = f"{name}.bin"
        np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tofile(path / fname)
        entries[name] = {"file": fname, "dtype": dtype, "shape": list(arr.shape)}
    manifest = {"format": FORMAT, "version": VERSION, "kind": kind,
                "meta": meta or {}, "arrays": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_arrays(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(arrays, meta)``; floats come back as float64, ints as int64."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ContainerError(f"no manifest.json in {path}") from e
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{path}: unknown container format {manifest.get('format')!r}")
    if kind is not None and manifest.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, got {manifest.get('kind')!r}")
    arrays = {}
    for name, e in manifest["arrays"].items():
        raw = np.fromfile(path / e["file"], dtype=_DTYPES[e["dtype"]])
        shape = tuple(e["shape"])
        if raw.size != int(np.prod(shape)):
            raise ContainerError(f"{path / e['file']}: size does not match shape {shape}")
        raw = raw.reshape(shape)
        arrays[name] = raw.astype(np.float64) if e["dtype"] == "float32" else raw.astype(np.int64)
    return arrays, manifest.get("meta", {})


def f32(x) -> np.ndarray:
    """Round to the precision the container stores."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)
