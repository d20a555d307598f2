"""Bit-exact persistence for tensors, checkpoints and dataset descriptors.

Tensor files (``*.gt``) are a small fixed little-endian container::

    magic   4s   b"GTNS"
    version u32  1
    dtype   u32  1 = float32, 2 = int32
    ndim    u32  <= 4
    dims    ndim x u32
    payload row-major little-endian scalars

Checkpoints concatenate named tensor bodies and end with a JSON manifest.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from core.errors import CheckpointError, DatasetError, TensorFormatError
from core.logs import get_logger

logger = get_logger(__name__)

MAGIC = b"GTNS"
VERSION = 1
MAX_NDIM = 4
IGNORE = -1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
_MAX_PAYLOAD_BYTES = 1 << 34

CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}


def _dtype_code(dtype: np.dtype) -> int | None:
    if dtype.itemsize != 4:
        return None
    return {"f": 1, "i": 2}.get(dtype.kind)


def _as_array(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def encode_tensor(t) -> bytes:
    arr = _as_array(t)
    code = _dtype_code(arr.dtype)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; only float32 and int32 are stored")
    if arr.ndim > MAX_NDIM:
        raise TensorFormatError(f"ndim {arr.ndim} exceeds {MAX_NDIM}")
    header = _HEADER.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes(order="C")
    return header + dims + payload


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor body starting at ``offset``; returns (array, next offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise TensorFormatError("bad magic")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unsupported dtype code {code}")
    if ndim > MAX_NDIM:
        raise TensorFormatError("dims overflow")
    offset += _HEADER.size
    if len(buf) - offset < 4 * ndim:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = CODE_DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if nbytes > _MAX_PAYLOAD_BYTES:
        raise TensorFormatError("dims overflow")
    if len(buf) - offset < nbytes:
        raise TensorFormatError("truncated payload")
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def write_tensor(t, path: str | os.PathLike) -> None:
    data = encode_tensor(t)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise TensorFormatError(f"cannot write {path}: {e}") from e


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise TensorFormatError(f"cannot read {path}: {e}") from e
    arr, end = decode_tensor(data)
    if end != len(data):
        logger.warning("%s: %d trailing bytes ignored", path, len(data) - end)
    return arr


# --- checkpoints ---------------------------------------------------------

OPTIM_PREFIX = "optim."


@dataclass
class ParamStore:
    """Named tensors with a frozen/trainable partition.

    ``optimizer`` holds AdamW moments keyed ``optim.<param>.<slot>``; it only ever
    refers to trainable names.
    """

    tensors: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def trainable(self) -> frozenset[str]:
        return frozenset(self.tensors) - self.frozen

    def validate(self) -> None:
        unknown = self.frozen - set(self.tensors)
        if unknown:
            raise CheckpointError(f"frozen names without tensors: {sorted(unknown)}")
        for key in self.optimizer:
            if not key.startswith(OPTIM_PREFIX):
                raise CheckpointError(f"optimizer entry {key!r} lacks the {OPTIM_PREFIX!r} prefix")
            owner = key[len(OPTIM_PREFIX):].rsplit(".", 1)[0]
            if owner in self.frozen:
                raise CheckpointError(f"optimizer state recorded for frozen tensor {owner}")

    def equals(self, other: "ParamStore") -> bool:
        if set(self.tensors) != set(other.tensors) or self.frozen != other.frozen:
            return False
        if set(self.optimizer) != set(other.optimizer):
            return False
        for a, b in ((self.tensors, other.tensors), (self.optimizer, other.optimizer)):
            for k in a:
                if a[k].dtype != b[k].dtype or a[k].shape != b[k].shape:
                    return False
                if a[k].tobytes() != b[k].tobytes():
                    return False
        return True


def save_checkpoint(params: ParamStore, manifest: dict, path: str | os.PathLike) -> None:
    params.validate()
    names = sorted(params.tensors) + sorted(params.optimizer)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    meta = dict(manifest)
    meta["frozen"] = sorted(params.frozen)
    meta["trainable"] = sorted(params.trainable)
    meta["optimizer_entries"] = sorted(params.optimizer)
    chunks = [_U32.pack(len(names))]
    for name in names:
        arr = params.tensors[name] if name in params.tensors else params.optimizer[name]
        raw = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw)))
        chunks.append(raw)
        chunks.append(encode_tensor(arr))
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(_U32.pack(len(text)))
    chunks.append(text)
    try:
        with open(path, "wb") as f:
            f.write(b"".join(chunks))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug("saved checkpoint %s (%d entries)", path, len(names))


def load_checkpoint(
    path: str | os.PathLike,
    expected_names: Iterable[str] | None = None,
    config_digest: str | None = None,
    strict: bool = False,
) -> ParamStore:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    buf = memoryview(data)
    try:
        (count,) = _U32.unpack_from(buf, 0)
        offset = 4
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = _U32.unpack_from(buf, offset)
            offset += 4
            name = bytes(buf[offset:offset + n]).decode("utf-8")
            offset += n
            arr, offset = decode_tensor(buf, offset)
            if name in entries:
                raise CheckpointError(f"duplicate entry {name}")
            entries[name] = arr
        (mlen,) = _U32.unpack_from(buf, offset)
        offset += 4
        meta = json.loads(bytes(buf[offset:offset + mlen]).decode("utf-8"))
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint {path}") from e
    except ValueError as e:
        # JSONDecodeError and UnicodeDecodeError are both ValueErrors
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: {e}") from e
    if not isinstance(meta, dict):
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: not a mapping")

    declared = set(meta.get("frozen", [])) | set(meta.get("trainable", []))
    declared |= set(expected_names or ())
    for name in sorted(declared):
        if name not in entries:
            raise CheckpointError(f"missing parameter {name!r} in {path}")
    if strict and config_digest is not None and meta.get("config_digest") != config_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint {meta.get('config_digest')} vs run {config_digest}"
        )
    tensors = {k: v for k, v in entries.items() if not k.startswith(OPTIM_PREFIX)}
    optim = {k: v for k, v in entries.items() if k.startswith(OPTIM_PREFIX)}
    return ParamStore(tensors=tensors, frozen=frozenset(meta.get("frozen", [])), optimizer=optim, manifest=meta)


# --- dataset descriptors --------------------------------------------------

META_FILE = "meta.json"


@dataclass
class DomainDatasetDescriptor:
    domain: str
    class_count: int
    channel_count: int
    image_paths: list[str]
    mask_paths: list[str]
    shapes: list[tuple[int, int]]
    labeled_budget: list[tuple[int, int, int]] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.image_paths)

    def validate(self) -> None:
        if self.class_count < 1 or self.channel_count < 1:
            raise DatasetError(f"{self.domain}: class_count and channel_count must be positive")
        if len(self.image_paths) != len(self.mask_paths) or len(self.image_paths) != len(self.shapes):
            raise DatasetError(f"{self.domain}: image/mask/shape lists differ in length")
        for img, pix, cls in self.labeled_budget:
            if not 0 <= img < len(self.image_paths):
                raise DatasetError(f"{self.domain}: budget image index {img} out of range")
            h, w = self.shapes[img]
            if not 0 <= pix < h * w:
                raise DatasetError(f"{self.domain}: budget pixel index {pix} out of range for {h}x{w}")
            if not 0 <= cls < self.class_count:
                raise DatasetError(f"{self.domain}: budget class id {cls} >= class_count {self.class_count}")

    def _resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def load_image(self, i: int) -> np.ndarray:
        return read_tensor(self._resolve(self.image_paths[i]))

    def load_mask(self, i: int) -> np.ndarray:
        return read_tensor(self._resolve(self.mask_paths[i]))

    def budget_mask(self, i: int) -> np.ndarray:
        h, w = self.shapes[i]
        out = np.full(h * w, IGNORE, dtype=np.int32)
        for img, pix, cls in self.labeled_budget:
            if img == i:
                out[pix] = cls
        return out.reshape(h, w)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "class_count": self.class_count,
            "channel_count": self.channel_count,
            "images": list(self.image_paths),
            "masks": list(self.mask_paths),
            "shapes": [list(s) for s in self.shapes],
            "labeled_budget": [list(b) for b in self.labeled_budget],
        }


def save_descriptor(desc: DomainDatasetDescriptor, directory: str | os.PathLike) -> Path:
    desc.validate()
    path = Path(directory) / META_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(desc.to_dict(), f, indent=2, sort_keys=True)
    return path


def load_descriptor(directory: str | os.PathLike) -> DomainDatasetDescriptor:
    directory = Path(directory)
    path = directory / META_FILE
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read dataset descriptor {path}: {e}") from e
    try:
        desc = DomainDatasetDescriptor(
            domain=data["domain"],
            class_count=int(data["class_count"]),
            channel_count=int(data["channel_count"]),
            image_paths=list(data["images"]),
            mask_paths=list(data["masks"]),
            shapes=[tuple(s) for s in data["shapes"]],
            labeled_budget=[tuple(b) for b in data.get("labeled_budget", [])],
            root=directory,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed descriptor {path}: {e}") from e
    desc.validate()
    return desc
