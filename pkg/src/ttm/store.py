"""Parameter store and the TTMF checkpoint format.

Byte layout (all integers little-endian)::

    offset 0   4 bytes   magic b"TTMF"
    offset 4   u16       format version
    offset 6   u32       header length H
    offset 10  H bytes   UTF-8 JSON header (sorted keys, compact separators)
               pad       zero bytes up to the next multiple of 8
    payload    tensors, each starting at an 8-byte aligned offset relative to
               the payload start, in lexicographic name order
    trailer    u32       CRC32 of the payload bytes

The header holds the model and head configs, design metadata, the resolution
registry, the architecture fingerprint and a tensor directory of
``{name, group, dtype, shape, offset, nbytes, trainable}`` records.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
import warnings
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import HeadConfig, ModelConfig, canonical_json, from_dict

MAGIC = b"TTMF"
VERSION = 1
_ALIGN = 8

DESIGN_METADATA = {
    "activation": "gelu_tanh",
    "mixer_norm": "layernorm; axis set by model.mixer_norm",
    "gate": "x*softmax(xW+b) over the mixed axis; placement set by model.gate_placement",
    "sublayer_order": "patch,feature,channel",
    "resolution_prefix": "dropped before decoder",
    "instance_norm": "population std, eps=1e-5 added to std",
    "exog_head": "per time step",
}


class CheckpointError(Exception):
    code = "checkpoint_error"


class CRCError(CheckpointError):
    code = "crc_mismatch"


class VersionError(CheckpointError):
    code = "version_mismatch"


class FingerprintError(CheckpointError):
    code = "fingerprint_mismatch"


class FormatError(CheckpointError):
    code = "bad_format"


class NarrowingWarning(UserWarning):
    """A 64-bit checkpoint was loaded while running in 32-bit mode."""


class ParameterStore:
    """Named parameter tensors with a trainable flag each."""

    def __init__(self, model: ModelConfig, head: HeadConfig, meta: dict | None = None):
        self.model = model
        self.head = head
        self.meta = dict(meta or {})
        self.params: dict[str, T.Tensor] = {}
        self.optimizer: dict[str, np.ndarray] = {}
        self.optimizer_step = 0

    @property
    def fingerprint(self) -> str:
        return self.model.fingerprint()

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        self.params[name] = T.Tensor(value, requires_grad=trainable)

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name, t in self.params.items():
            if name.startswith(prefix):
                t.requires_grad = trainable
                t.grad = None

    def is_trainable(self, name: str) -> bool:
        return self.params[name].requires_grad

    def trainable_names(self) -> list[str]:
        return [n for n in sorted(self.params) if self.params[n].requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over names and raw bytes of all tensors under ``prefix``."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterStore":
        out = ParameterStore(
            dataclasses.replace(self.model), dataclasses.replace(self.head), meta=_deepcopy_json(self.meta)
        )
        for name, t in self.params.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        out.optimizer = {k: v.copy() for k, v in self.optimizer.items()}
        out.optimizer_step = self.optimizer_step
        return out


def _deepcopy_json(obj):
    return json.loads(json.dumps(obj))


def _header_for(store: ParameterStore) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    entries: list[tuple[str, str, np.ndarray, bool]] = []
    for name in sorted(store.params):
        t = store.params[name]
        entries.append((name, "param", t.data, t.requires_grad))
    for name in sorted(store.optimizer):
        entries.append((name, "optimizer", store.optimizer[name], False))
    directory = []
    blobs = []
    offset = 0
    for name, group, arr, trainable in entries:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        directory.append(
            {
                "name": name,
                "group": group,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "trainable": bool(trainable),
            }
        )
        blobs.append((offset, raw))
        offset += len(raw)
        offset += (-offset) % _ALIGN
    header = {
        "model": dataclasses.asdict(store.model),
        "head": dataclasses.asdict(store.head),
        "meta": store.meta,
        "design": DESIGN_METADATA,
        "fingerprint": store.fingerprint,
        "optimizer_step": store.optimizer_step,
        "payload_bytes": offset,
        "tensors": directory,
    }
    return header, blobs


def to_bytes(store: ParameterStore) -> bytes:
    header, blobs = _header_for(store)
    hbytes = canonical_json(header).encode()
    prefix = MAGIC + struct.pack("<HI", VERSION, len(hbytes)) + hbytes
    prefix += b"\0" * ((-len(prefix)) % _ALIGN)
    payload = bytearray(header["payload_bytes"])
    for off, raw in blobs:
        payload[off:off + len(raw)] = raw
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    return prefix + bytes(payload) + struct.pack("<I", crc)


def save(store: ParameterStore, path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(store)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError("not a TTMF checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", buf[4:10])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(buf) < 10 + hlen:
        raise CRCError("checkpoint truncated inside header")
    header = json.loads(buf[10:10 + hlen].decode())
    start = 10 + hlen
    start += (-start) % _ALIGN
    return header, start


def from_bytes(buf: bytes, expected_fingerprint: str | None = None, header_only: bool = False) -> ParameterStore:
    header, start = read_header(buf)
    model = from_dict(ModelConfig, header["model"])
    head = from_dict(HeadConfig, header["head"])
    if model.fingerprint() != header["fingerprint"]:
        raise FingerprintError("stored fingerprint does not match stored model config")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise FingerprintError(f"fingerprint {header['fingerprint'][:12]} != expected {expected_fingerprint[:12]}")
    store = ParameterStore(model, head, meta=header.get("meta", {}))
    store.optimizer_step = int(header.get("optimizer_step", 0))
    if header_only:
        for rec in header["tensors"]:
            if rec["group"] == "param":
                store.add(rec["name"], np.zeros(rec["shape"]), trainable=rec["trainable"])
        return store
    nbytes = header["payload_bytes"]
    payload = buf[start:start + nbytes]
    trailer = buf[start + nbytes:start + nbytes + 4]
    if len(payload) != nbytes or len(trailer) != 4:
        raise CRCError("checkpoint truncated (payload or CRC missing)")
    if len(buf) != start + nbytes + 4:
        raise FormatError("trailing bytes after CRC")
    (crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CRCError("payload CRC32 mismatch")
    prev_end = 0
    narrowed = False
    current = T.get_dtype()
    for rec in header["tensors"]:
        off = rec["offset"]
        if off < prev_end or off % _ALIGN:
            raise FormatError(f"tensor {rec['name']} has an invalid offset")
        prev_end = off + rec["nbytes"]
        arr = np.frombuffer(payload, dtype=np.dtype(rec["dtype"]), count=int(np.prod(rec["shape"], dtype=np.int64)),
                            offset=off).reshape(rec["shape"])
        if arr.dtype.itemsize > current.itemsize:
            narrowed = True
        arr = arr.astype(current)
        if rec["group"] == "param":
            store.add(rec["name"], arr, trainable=rec["trainable"])
        else:
            store.optimizer[rec["name"]] = arr
    if narrowed:
        warnings.warn(f"narrowing 64-bit checkpoint tensors to {current.name}", NarrowingWarning, stacklevel=2)
    return store


def load(path, expected_fingerprint: str | None = None, header_only: bool = False) -> ParameterStore:
    return from_bytes(Path(path).read_bytes(), expected_fingerprint=expected_fingerprint, header_only=header_only)
