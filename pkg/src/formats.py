"""Binary containers: DFBF model checkpoints and DFDS image datasets.

DFBF layout: magic "DFBF", u32 version, u64 header length, UTF-8 JSON header
(architecture descriptor + tensor manifest), raw little-endian f32 payload.

DFDS layout: magic "DFDS", u32 version, u32 M, u32 C, u32 h, u32 w, u64 header
length, UTF-8 JSON header, M*C*h*w little-endian f32 pixels, then an optional
u8 label per image when the header sets ``has_labels``.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import DataFormatError
from src.graph import NetworkGraph

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFBF"
CHECKPOINT_VERSION = 1
_CHECKPOINT_PREFIX = struct.Struct("<4sIQ")

DATASET_MAGIC = b"DFDS"
DATASET_VERSION = 1
_DATASET_PREFIX = struct.Struct("<4sIIIIIQ")

_F32 = np.dtype("<f4")


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(graph: NetworkGraph) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, tensor in graph.parameters("all", include_buffers=True).items():
        raw = np.ascontiguousarray(tensor.data, dtype=_F32).tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "dtype": "f32",
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = _canonical_json({"architecture": graph.architecture(), "tensors": manifest})
    return _CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> NetworkGraph:
    if len(blob) < _CHECKPOINT_PREFIX.size:
        raise DataFormatError(f"checkpoint truncated: {len(blob)} bytes is shorter than the prefix")
    magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"checkpoint magic mismatch: expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unknown checkpoint format version {version}")
    start = _CHECKPOINT_PREFIX.size
    if start + header_len > len(blob):
        raise DataFormatError("checkpoint truncated inside the JSON header")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"checkpoint header is not valid JSON: {e}") from e

    payload = memoryview(blob)[start + header_len:]
    params: Dict[str, Dict[str, Tensor]] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["dtype"] != "f32" or entry["nbytes"] != count * _F32.itemsize:
            raise DataFormatError(f"tensor {entry['name']}: inconsistent manifest entry")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise DataFormatError(f"checkpoint payload truncated at tensor {entry['name']}")
        data = np.frombuffer(payload[entry["offset"]:end], dtype=_F32).astype(np.float32)
        layer_id, pname = entry["name"].rsplit(".", 1)
        params.setdefault(layer_id, {})[pname] = Tensor(data.reshape(entry["shape"]), dtype=np.float32)
    return NetworkGraph.from_architecture(header["architecture"], params)


def save_checkpoint(graph: NetworkGraph, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(graph))
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Path) -> NetworkGraph:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def read_manifest(path: Path) -> Dict[str, Any]:
    """Parse only the JSON header of a checkpoint"""
    blob = Path(path).read_bytes()
    magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"checkpoint magic mismatch: found {magic!r}")
    start = _CHECKPOINT_PREFIX.size
    return json.loads(blob[start:start + header_len].decode("utf-8"))


def pixel_checksum(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype=_F32).tobytes()).hexdigest()


def save_image_container(path: Path, images: np.ndarray, header: Dict[str, Any],
                         labels: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """Write a DFDS file; returns the header actually stored"""
    if images.ndim != 4:
        raise DataFormatError(f"images must be [M,C,h,w], got {images.shape}")
    M, C, h, w = images.shape
    header = dict(header)
    header["pixel_sha256"] = pixel_checksum(images)
    header["has_labels"] = labels is not None
    if labels is not None:
        if len(labels) != M:
            raise DataFormatError(f"{len(labels)} labels for {M} images")
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
            raise DataFormatError("labels must fit in one unsigned byte")
    encoded = _canonical_json(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_DATASET_PREFIX.pack(DATASET_MAGIC, DATASET_VERSION, M, C, h, w, len(encoded)))
        f.write(encoded)
        f.write(np.ascontiguousarray(images, dtype=_F32).tobytes())
        if labels is not None:
            f.write(np.asarray(labels, dtype=np.uint8).tobytes())
    logger.info(f"Saved {M} images ({C}x{h}x{w}) to {path}")
    return header


def load_image_container(path: Path) -> Tuple[np.ndarray, Dict[str, Any], Optional[np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < _DATASET_PREFIX.size:
        raise DataFormatError(f"dataset truncated: {len(blob)} bytes is shorter than the prefix")
    magic, version, M, C, h, w, header_len = _DATASET_PREFIX.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise DataFormatError(f"dataset magic mismatch: expected {DATASET_MAGIC!r}, found {magic!r}")
    if version != DATASET_VERSION:
        raise DataFormatError(f"unknown dataset format version {version}")
    start = _DATASET_PREFIX.size
    if start + header_len > len(blob):
        raise DataFormatError("dataset truncated inside the JSON header")
    header = json.loads(blob[start:start + header_len].decode("utf-8"))

    pixel_start = start + header_len
    pixel_bytes = M * C * h * w * _F32.itemsize
    label_bytes = M if header.get("has_labels") else 0
    expected = pixel_start + pixel_bytes + label_bytes
    if len(blob) != expected:
        raise DataFormatError(f"dataset size mismatch: expected {expected} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype=_F32, count=M * C * h * w, offset=pixel_start)
    images = images.astype(np.float32).reshape(M, C, h, w)
    labels = None
    if label_bytes:
        labels = np.frombuffer(blob, dtype=np.uint8, count=M, offset=pixel_start + pixel_bytes).astype(np.int64)
    if header.get("pixel_sha256") and header["pixel_sha256"] != pixel_checksum(images):
        raise DataFormatError(f"dataset {path}: pixel checksum does not match header")
    return images, header, labels
