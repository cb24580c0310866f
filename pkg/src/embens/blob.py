"""Versioned tensor blob: magic, header length, JSON header, raw little-endian float64."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .net import EnsembleParams
from .specs import ArchSpec

MAGIC = b"EMBENS\x00\x01"
FORMAT_VERSION = 1


class BlobFormatError(ValueError):
    pass


def write_blob(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise BlobFormatError("not an embens blob (bad magic)")
    (n,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise BlobFormatError(f"unsupported format_version {header.get('format_version')}")
    data = np.frombuffer(raw, dtype="<f8", offset=start + n)
    out = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = data[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(float)
    return out, header["meta"]


def save_params(path, params: EnsembleParams, arch: ArchSpec, seed: int | None = None) -> None:
    write_blob(path, params.arrays(), {"kind": "ensemble_params", "arch": arch.to_dict(),
                                       "seed": seed})


def load_params(path) -> tuple[EnsembleParams, ArchSpec, dict]:
    arrays, meta = read_blob(path)
    if meta.get("kind") != "ensemble_params":
        raise BlobFormatError("blob does not hold ensemble parameters")
    return EnsembleParams.from_arrays(arrays), ArchSpec.from_dict(meta["arch"]), meta
