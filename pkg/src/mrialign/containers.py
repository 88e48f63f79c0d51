"""Versioned binary container shared by checkpoints and datasets.

Layout (all integers little-endian)::

    magic    4 bytes   b"MRAL"
    kind     4 bytes   b"CKPT" | b"DSET"
    version  uint32
    hlen     uint64    length of the JSON header in bytes
    header   hlen bytes of UTF-8 JSON:
               {"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload  raw row-major array bytes; offsets are relative to the payload start

Arrays keep their dtype (``<f8``, ``<i8`` or ``|u1``), so a round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .synthdata import DatasetSpec, PatientRecord

MAGIC = b"MRAL"
VERSION = 1
CHECKPOINT = b"CKPT"
DATASET = b"DSET"
_ALLOWED = {"<f8", "<i8", "|u1"}


class ContainerError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype("<i8")
    elif arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype.str not in _ALLOWED:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    return np.require(arr, requirements="C")


def write_container(path, kind: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = _canonical(arrays[name])
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + kind + struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    if data[4:8] != kind:
        raise ContainerError(f"{path}: expected a {kind.decode()} container, found {data[4:8].decode(errors='replace')}")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    header = json.loads(data[20:20 + hlen])
    payload = memoryview(data)[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["meta"], arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    arrays = {name: (p.value if hasattr(p, "value") else p) for name, p in params.items()}
    write_container(path, CHECKPOINT, meta or {}, arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return read_container(path, CHECKPOINT)


def check_compatible(expected: dict[str, tuple], arrays: dict[str, np.ndarray]) -> None:
    """Raise unless every expected parameter is present with the expected shape."""
    for name, shape in expected.items():
        if name not in arrays:
            raise IncompatibleCheckpointError(f"checkpoint lacks parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise IncompatibleCheckpointError(
                f"parameter {name!r} has shape {tuple(arrays[name].shape)}, model expects {tuple(shape)}")


# ---------------------------------------------------------------- datasets

def save_dataset(path, spec: DatasetSpec, records: list[PatientRecord]) -> None:
    lengths = np.array([len(r.report_tokens) for r in records], dtype=np.int64)
    arrays = {
        "volumes": np.stack([r.volume for r in records]),
        "masks": np.stack([r.seg_mask for r in records]).astype(np.uint8),
        "tokens": np.concatenate([r.report_tokens for r in records]).astype(np.int64),
        "token_lengths": lengths,
        "locations": np.array([r.location for r in records], dtype=np.int64),
        "labels": np.array([r.marker_label for r in records], dtype=np.int64),
        "latents": np.stack([r.latent for r in records]),
    }
    meta = {"spec": spec.to_dict(), "n_records": len(records),
            "report_texts": [r.report_text for r in records]}
    write_container(path, DATASET, meta, arrays)


def load_dataset(path) -> tuple[DatasetSpec, list[PatientRecord]]:
    meta, a = read_container(path, DATASET)
    spec_dict = dict(meta["spec"])
    spec_dict["dims"] = tuple(spec_dict["dims"])
    spec = DatasetSpec(**spec_dict)
    cuts = np.cumsum(a["token_lengths"])[:-1]
    tokens = np.split(a["tokens"], cuts)
    records = [
        PatientRecord(volume=a["volumes"][i], report_tokens=tokens[i], location=int(a["locations"][i]),
                      marker_label=int(a["labels"][i]), seg_mask=a["masks"][i], latent=a["latents"][i],
                      report_text=meta["report_texts"][i])
        for i in range(meta["n_records"])
    ]
    return spec, records
