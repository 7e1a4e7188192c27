"""Versioned single-file container for named arrays plus JSON metadata.

The file is a zip archive holding ``manifest.json`` and one raw
little-endian buffer per array; the manifest records each array's member
name, shape and dtype.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_NAME = "diffhpe-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    entries = {}
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (name, arr) in enumerate(sorted(arrays.items())):
            arr = np.asarray(arr)
            le = arr.dtype.newbyteorder("<")
            member = f"arrays/{i:05d}.bin"
            info = zipfile.ZipInfo(member, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, np.ascontiguousarray(arr, dtype=le).tobytes(), zipfile.ZIP_DEFLATED)
            entries[name] = {"member": member, "shape": list(arr.shape), "dtype": le.str}
        manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "arrays": entries, "meta": meta}
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True), zipfile.ZIP_DEFLATED)
    tmp.replace(path)
    return path


def load_arrays(path):
    """Return ``(arrays, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise CheckpointError(f"{path}: not a checkpoint container ({e})") from None
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: unexpected format {manifest.get('format')!r}")
        if manifest.get("version", 0) > FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest['version']}")
        arrays = {}
        for name, e in manifest["arrays"].items():
            raw = zf.read(e["member"])
            dt = np.dtype(e["dtype"])
            expected = int(np.prod(e["shape"])) * dt.itemsize
            if len(raw) != expected:
                raise CheckpointError(f"{path}: array {name!r} has {len(raw)} bytes, expected {expected}")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]
