"""Checkpoint container.

A checkpoint is a single zip archive holding ``manifest.json`` (every
tensor's name, dtype, shape and byte offset, plus free-form metadata) and
``tensors.bin`` (the concatenated raw little-endian payloads).  Writes are
deterministic (fixed entry timestamps, stored uncompressed) so identical
state produces byte-identical archives, and round-trips are bitwise.
"""

import json
import zipfile

import numpy as np
import torch

FORMAT_NAME = "crossview-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp for reproducible bytes


def _as_le_array(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)  # tobytes() yields C-order regardless of layout
    le = arr.dtype.newbyteorder("<")
    return arr.astype(le, copy=False)


def save_archive(path, tensors, meta=None):
    """Write named tensors (numpy arrays or torch tensors) plus metadata."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_le_array(tensors[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": entries,
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        info = zipfile.ZipInfo("tensors.bin", date_time=_EPOCH)
        zf.writestr(info, b"".join(blobs))


def load_archive(path):
    """Return (tensors: dict[str, np.ndarray], meta: dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_NAME:
            raise ValueError(f"{path} is not a {FORMAT_NAME} archive")
        blob = zf.read("tensors.bin")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return tensors, manifest["meta"]


def module_tensors(prefix, module):
    """Flatten a torch module's state dict under a name prefix."""
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix, module, tensors):
    """Restore a module from the flattened tensors, bitwise, strict on names."""
    state = {}
    plen = len(prefix) + 1
    for name, arr in tensors.items():
        if name.startswith(prefix + "."):
            state[name[plen:]] = torch.from_numpy(arr)
    module.load_state_dict(state, strict=True)
