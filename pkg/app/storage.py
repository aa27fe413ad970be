"""Binary on-disk formats: datasets ("EGRD") and checkpoints ("EGRT").

Both are little-endian containers that start with a 4-byte magic and a
u32 format version; loaders check those eight bytes before reading or
allocating anything else. Layouts are documented in docs/formats.md.

Writes go to a sibling temp file that is renamed into place, so an
interrupted write never leaves a half-written artifact at ``path``.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from app.errors import CheckpointIncompatible, DatasetCorrupt, IoFailure
from app.schemas import RunConfig
from app.services.optim import OptimizerState
from app.services.so3 import is_rotation
from app.services.synthgen import Dataset, Episode, ObjectRecord, ProceduralObject, dequantize, quantize
from app.utils.hashing import canonical_json

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"EGRD"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"EGRT"
CHECKPOINT_VERSION = 1

_VALUE_DTYPES = {"f32": "<f4", "f64": "<f8"}


# ---------------------------------------------------------------------------
# Low-level helpers
# ---------------------------------------------------------------------------

class _Reader:
    """Cursor over an in-memory buffer; raises ``error_cls`` on truncation."""

    def __init__(self, buf: bytes, path, error_cls):
        self.buf = buf
        self.pos = 0
        self.path = path
        self.error_cls = error_cls

    def _need(self, n: int) -> None:
        if self.pos + n > len(self.buf):
            raise self.error_cls(self.path, f"truncated at byte {self.pos} (need {n} more)")

    def unpack_all(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        self._need(size)
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return values

    def unpack(self, fmt: str):
        values = self.unpack_all(fmt)
        return values if len(values) > 1 else values[0]

    def raw(self, n: int) -> bytes:
        self._need(n)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.raw(itemsize * count), dtype=dtype).copy()

    def text(self, len_fmt: str) -> str:
        start = self.pos
        try:
            return self.raw(self.unpack(len_fmt)).decode("utf-8")
        except UnicodeDecodeError:
            raise self.error_cls(self.path, f"invalid UTF-8 string at byte {start}") from None


def _text(value: str, len_fmt: str) -> bytes:
    data = value.encode("utf-8")
    return struct.pack(len_fmt, len(data)) + data


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(path, e.strerror or str(e)) from e


def _read_header(path, magic: bytes, version: int, error_cls) -> bytes:
    """Check magic+version from the first 8 bytes, then read the rest."""
    try:
        with open(path, "rb") as f:
            head = f.read(8)
            if len(head) < 8 or head[:4] != magic:
                raise error_cls(path, f"bad magic {head[:4]!r}, expected {magic!r}")
            found = struct.unpack("<I", head[4:8])[0]
            if found != version:
                raise error_cls(path, f"unsupported format version {found}, expected {version}")
            return f.read()
    except FileNotFoundError as e:
        raise IoFailure(path, "no such file") from e
    except OSError as e:
        raise IoFailure(path, e.strerror or str(e)) from e


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def _pack_view(R: np.ndarray, image: np.ndarray) -> bytes:
    pixels = quantize(image)
    h, w = pixels.shape[:2]
    return (
        np.asarray(R, dtype="<f8").tobytes()
        + struct.pack("<II", w, h)
        + pixels.tobytes()
    )


def encode_dataset(dataset: Dataset) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<I", DATASET_VERSION), _text(canonical_json(dataset.manifest), "<I")]
    for record in dataset.records:
        obj, ep = record.obj, record.episode
        parts.append(_text(obj.object_id, "<H"))
        parts.append(struct.pack("<QI", obj.seed, obj.triangles.shape[0]))
        parts.append(np.asarray(obj.triangles, dtype="<f8").tobytes())
        parts.append(np.asarray(obj.colors, dtype="<f8").tobytes())
        parts.append(struct.pack("<II", ep.n_ref, ep.n_query))
        for R, img in zip(ep.ref_rotations, ep.ref_images):
            parts.append(_pack_view(R, img))
        for R, img in zip(ep.query_rotations, ep.query_images):
            parts.append(_pack_view(R, img))
    return b"".join(parts)


def write_dataset(dataset: Dataset, path) -> None:
    _atomic_write(path, encode_dataset(dataset))
    logger.info(f"Wrote dataset with {len(dataset.records)} objects to {path}")


def _read_views(reader: _Reader, count: int, path) -> Tuple[np.ndarray, np.ndarray]:
    rotations, images = [], []
    for _ in range(count):
        R = reader.array("<f8", 9).reshape(3, 3)
        if not is_rotation(R):
            raise DatasetCorrupt(path, f"stored rotation fails SO(3) checks at byte {reader.pos}")
        w, h = reader.unpack("<II")
        pixels = reader.array("u1", w * h * 3).reshape(h, w, 3)
        rotations.append(R)
        images.append(dequantize(pixels))
    return np.stack(rotations), np.stack(images)


def load_dataset(path, expected_data_hash: Optional[str] = None) -> Dataset:
    """Read a dataset; warn when its data hash differs from the expected one."""
    reader = _Reader(_read_header(path, DATASET_MAGIC, DATASET_VERSION, DatasetCorrupt), path, DatasetCorrupt)
    try:
        manifest = json.loads(reader.text("<I"))
    except json.JSONDecodeError as e:
        raise DatasetCorrupt(path, f"manifest is not valid JSON ({e.msg})") from e

    if expected_data_hash is not None and manifest.get("data_hash") != expected_data_hash:
        logger.warning(
            f"Dataset {path} was built from a different data config "
            f"(file {manifest.get('data_hash', '?')[:12]}, expected {expected_data_hash[:12]})"
        )

    records = []
    for _ in range(int(manifest.get("object_count", 0))):
        object_id = reader.text("<H")
        seed, n_tri = reader.unpack("<QI")
        triangles = reader.array("<f8", n_tri * 9).reshape(n_tri, 3, 3)
        colors = reader.array("<f8", n_tri * 3).reshape(n_tri, 3)
        n_ref, n_query = reader.unpack("<II")
        ref_rots, ref_imgs = _read_views(reader, n_ref, path)
        q_rots, q_imgs = _read_views(reader, n_query, path)
        obj = ProceduralObject(object_id=object_id, seed=seed, triangles=triangles, colors=colors)
        episode = Episode(object_id, ref_imgs, ref_rots, q_imgs, q_rots)
        records.append(ObjectRecord(obj=obj, episode=episode))
    if reader.pos != len(reader.buf):
        raise DatasetCorrupt(path, f"{len(reader.buf) - reader.pos} trailing bytes")
    return Dataset(manifest=manifest, records=records)


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    params: Dict[str, np.ndarray]
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    step: int = 0
    precision: str = "f32"

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def _pack_records(arrays: Dict[str, np.ndarray], dtype: str) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        parts.append(_text(name, "<H"))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def _read_records(reader: _Reader, dtype: str) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for _ in range(reader.unpack("<I")):
        name = reader.text("<H")
        rank = reader.unpack("<B")
        extents = reader.unpack_all(f"<{rank}Q")
        if name in out:
            raise CheckpointIncompatible(f"{reader.path}: duplicate record '{name}'")
        count = int(np.prod(extents)) if extents else 1
        out[name] = reader.array(dtype, count).reshape(extents)
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    dtype = _VALUE_DTYPES[ckpt.precision]
    opt = ckpt.optimizer
    return b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        _text(ckpt.config_hash, "<H"),
        _text(ckpt.precision, "<B"),
        struct.pack("<Q", ckpt.step),
        _text(canonical_json(ckpt.config.model_dump(mode="json")), "<I"),
        _pack_records(ckpt.params, dtype),
        struct.pack("<Q5d", opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay),
        _pack_records(opt.m, dtype),
        _pack_records(opt.v, dtype),
    ])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    _atomic_write(path, encode_checkpoint(ckpt))
    logger.info(f"Saved checkpoint at step {ckpt.step} to {path}")


class _CheckpointError(CheckpointIncompatible):
    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")


def load_checkpoint(path) -> Checkpoint:
    reader = _Reader(_read_header(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _CheckpointError), path, _CheckpointError)
    stored_hash = reader.text("<H")
    precision = reader.text("<B")
    if precision not in _VALUE_DTYPES:
        raise CheckpointIncompatible(f"{path}: unknown precision tag '{precision}'")
    step = reader.unpack("<Q")
    try:
        config = RunConfig.model_validate_json(reader.text("<I"))
    except ValueError as e:
        raise CheckpointIncompatible(f"{path}: embedded config is invalid ({e})") from e
    if config.config_hash() != stored_hash:
        raise CheckpointIncompatible(f"{path}: embedded config does not match its hash")

    dtype = _VALUE_DTYPES[precision]
    params = _read_records(reader, dtype)
    opt_step, lr, beta1, beta2, eps, wd = reader.unpack("<Q5d")
    m = _read_records(reader, dtype)
    v = _read_records(reader, dtype)
    if reader.pos != len(reader.buf):
        raise CheckpointIncompatible(f"{path}: {len(reader.buf) - reader.pos} trailing bytes")
    optimizer = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=wd, step=opt_step, m=m, v=v)
    return Checkpoint(config=config, params=params, optimizer=optimizer, step=step, precision=precision)
