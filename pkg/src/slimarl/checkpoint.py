"""Binary checkpoint bundles.

Layout: 8-byte magic, u32 format version, u64 header length, canonical JSON
header, concatenated little-endian float64 payload, 32-byte sha256 footer over
header+payload. The header lists named entries (networks or bare matrices)
with offsets into the payload, plus caller metadata (seed, config hash).
Round trips are bit-exact; no timestamps are written so identical inputs
produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CheckpointCorruptError,
    CheckpointHashError,
    CheckpointVersionError,
)
from .nets import NetworkSpec, ParamStore, param_count

MAGIC = b"SLIMCKPT"
FORMAT_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class BundleEntry:
    name: str
    kind: str  # "network" | "matrix"
    values: np.ndarray
    spec: Optional[NetworkSpec] = None
    shape: Optional[tuple] = None


@dataclass
class Bundle:
    entries: dict
    meta: dict
    seed: Optional[int] = None

    def network(self, name: str):
        e = self.entries[name]
        if e.kind != "network":
            raise KeyError(f"entry {name!r} is a {e.kind}, not a network")
        store = ParamStore.zeros(e.values.size)
        store.values[:] = e.values
        return e.spec, store

    def matrix(self, name: str) -> np.ndarray:
        e = self.entries[name]
        return e.values.reshape(e.shape)


def save_bundle(path, entries: list[BundleEntry], meta: dict, seed: Optional[int] = None):
    """Write a bundle; entry order is preserved in the file."""
    descriptors = []
    chunks = []
    offset = 0
    for e in entries:
        flat = np.ascontiguousarray(e.values, dtype="<f8").ravel()
        d = {"name": e.name, "kind": e.kind, "offset": offset, "count": int(flat.size)}
        if e.kind == "network":
            if e.spec is None:
                raise ValueError(f"network entry {e.name!r} needs a spec")
            if flat.size != param_count(e.spec):
                raise ValueError(
                    f"entry {e.name!r}: {flat.size} values but spec needs "
                    f"{param_count(e.spec)}"
                )
            d["spec"] = e.spec.to_dict()
        elif e.kind == "matrix":
            shape = tuple(e.shape) if e.shape is not None else e.values.shape
            if int(np.prod(shape)) != flat.size:
                raise ValueError(f"entry {e.name!r}: shape {shape} != size {flat.size}")
            d["shape"] = list(shape)
        else:
            raise ValueError(f"unknown entry kind {e.kind!r}")
        descriptors.append(d)
        chunks.append(flat.tobytes())
        offset += flat.size
    header = canonical_json(
        {"format_version": FORMAT_VERSION, "seed": seed, "meta": meta,
         "entries": descriptors}
    )
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(payload)
        f.write(digest)


def load_bundle(path) -> Bundle:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint {path}: {exc}") from exc
    pre = len(MAGIC) + 12
    if len(raw) < pre or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path} is not a checkpoint bundle")
    version, header_len = struct.unpack("<IQ", raw[len(MAGIC) : pre])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, reader supports {FORMAT_VERSION}"
        )
    if len(raw) < pre + header_len + 32:
        raise CheckpointCorruptError(f"{path} is truncated")
    header_bytes = raw[pre : pre + header_len]
    body = raw[pre + header_len : -32]
    digest = raw[-32:]
    if hashlib.sha256(header_bytes + body).digest() != digest:
        raise CheckpointHashError(f"{path} failed its integrity check")
    try:
        header = json.loads(header_bytes)
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path} header is not valid JSON") from exc
    entries = {}
    for d in header["entries"]:
        start, count = d["offset"] * 8, d["count"] * 8
        if start + count > len(body):
            raise CheckpointCorruptError(f"{path} payload is shorter than its header claims")
        values = np.frombuffer(body[start : start + count], dtype="<f8").astype(np.float64)
        if d["kind"] == "network":
            entries[d["name"]] = BundleEntry(
                d["name"], "network", values, spec=NetworkSpec.from_dict(d["spec"]))
        else:
            entries[d["name"]] = BundleEntry(
                d["name"], "matrix", values, shape=tuple(d["shape"]))
    return Bundle(entries=entries, meta=header.get("meta", {}), seed=header.get("seed"))


def save_network(path, spec: NetworkSpec, store: ParamStore, meta: dict,
                 seed: Optional[int] = None):
    """Single-network convenience wrapper around the bundle format."""
    save_bundle(path, [BundleEntry("net", "network", store.values, spec=spec)],
                meta=meta, seed=seed)


def load_network(path):
    bundle = load_bundle(path)
    spec, store = bundle.network("net")
    return spec, store, bundle.meta


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
