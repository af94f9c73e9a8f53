"""Binary container: a magic line, a one-line JSON manifest, then raw little-endian arrays.

The same layout backs parameter checkpoints (``#params v1``), embedding models
(``#embed v1``) and embedding tensors (``#embtensor v1``).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "u1": "|u1"}


def write_container(path, magic: str, manifest: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = {np.dtype("float64"): "f8", np.dtype("float32"): "f4", np.dtype("int64"): "i8",
                np.dtype("uint8"): "u1", np.dtype("bool"): "u1"}.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for array {name}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    head = dict(manifest)
    head["arrays"] = entries
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n".encode())
        fh.write(json.dumps(head, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def read_container(path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first].decode(errors="replace") != magic:
        raise FormatError(f"{path}: expected header '{magic}'")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise FormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[first + 1:second])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    offset = second + 1
    arrays = {}
    for entry in manifest.pop("arrays", []):
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated data for array '{entry['name']}' at byte {offset}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after last array")
    return manifest, arrays


def save_params(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    write_container(path, "#params v1", {"meta": meta or {}}, list(state.items()))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest, arrays = read_container(path, "#params v1")
    return arrays, manifest.get("meta", {})
