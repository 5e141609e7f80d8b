"""Parameter snapshots and their on-disk format.

A snapshot captures every parameter and buffer of a bundle (so BN running
statistics round-trip bit-exactly) but never optimizer state. The file
format is a flat archive::

    b"TBSNAP1\\n"
    <u64 little-endian: manifest length in bytes>
    <manifest JSON, utf-8>
    <record payloads, concatenated in manifest order, little-endian>

The manifest lists ordered records (name, shape, dtype, nbytes, offset)
plus an architecture fingerprint; restoring onto a bundle with a different
fingerprint is refused.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, IngestionError
from .models import ModelBundle

MAGIC = b"TBSNAP1\n"
FORMAT_NAME = "teca-bench-snapshot/1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def _records(bundle: ModelBundle):
    yield from bundle.named_parameters()
    yield from bundle.named_buffers()


def arch_fingerprint(bundle: ModelBundle) -> str:
    spec = {
        "arch": bundle.arch,
        "records": [
            [name, list(t.shape), str(t.dtype).removeprefix("torch.")]
            for name, t in _records(bundle)
        ],
    }
    blob = json.dumps(spec, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ParamSnapshot:
    fingerprint: str
    arch: dict
    arrays: dict[str, np.ndarray]  # insertion-ordered, C-contiguous

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays.items():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def take_snapshot(bundle: ModelBundle) -> ParamSnapshot:
    arrays = {}
    for name, t in _records(bundle):
        arrays[name] = t.detach().cpu().numpy().copy()
    return ParamSnapshot(fingerprint=arch_fingerprint(bundle), arch=bundle.arch, arrays=arrays)


def restore_snapshot(bundle: ModelBundle, snap: ParamSnapshot) -> None:
    if snap.fingerprint != arch_fingerprint(bundle):
        raise ContractError("snapshot architecture fingerprint does not match this bundle")
    with torch.no_grad():
        for name, t in _records(bundle):
            t.copy_(torch.from_numpy(snap.arrays[name]))


def save_snapshot(snap: ParamSnapshot, path: str | Path) -> None:
    path = Path(path)
    records = []
    offset = 0
    for name, arr in snap.arrays.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ContractError(f"unsupported snapshot dtype: {dtype}")
        nbytes = arr.astype(_DTYPES[dtype]).nbytes
        records.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "nbytes": nbytes, "offset": offset}
        )
        offset += nbytes
    manifest = {
        "format": FORMAT_NAME,
        "fingerprint": snap.fingerprint,
        "arch": snap.arch,
        "records": records,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in snap.arrays.items():
            fh.write(np.ascontiguousarray(arr).astype(_DTYPES[str(arr.dtype)]).tobytes())


def load_snapshot(path: str | Path) -> ParamSnapshot:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise IngestionError(f"{path}: bad magic at offset 0")
    (mlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    manifest = json.loads(raw[start : start + mlen].decode())
    if manifest.get("format") != FORMAT_NAME:
        raise IngestionError(f"{path}: unknown snapshot format {manifest.get('format')!r}")
    payload = start + mlen
    arrays = {}
    for rec in manifest["records"]:
        lo = payload + rec["offset"]
        hi = lo + rec["nbytes"]
        if hi > len(raw):
            raise IngestionError(f"{path}: truncated record {rec['name']!r} at offset {lo}")
        arr = np.frombuffer(raw[lo:hi], dtype=_DTYPES[rec["dtype"]]).astype(rec["dtype"])
        arrays[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return ParamSnapshot(fingerprint=manifest["fingerprint"], arch=manifest["arch"], arrays=arrays)
