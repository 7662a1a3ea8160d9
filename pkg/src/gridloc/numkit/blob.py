"""
Named-tensor blob files.

A blob is two files sharing a stem:

    {stem}.json   manifest
    {stem}.bin    raw little-endian float32 payload, tensors back to back

Manifest layout:

    {
      "format": "gridloc-blob",
      "version": 1,
      "blob": "{stem}.bin",
      "byte_order": "little",
      "sha256": "<hex digest of the .bin file>",
      "tensors": {
        "<name>": {"shape": [..], "dtype": "f32", "byte_offset": int, "byte_length": int},
        ...
      },
      "meta": {...}          # free-form, e.g. the ModelConfig of a checkpoint
    }

Tensors are stored in insertion order; ``byte_offset`` of each tensor equals
the sum of ``byte_length`` of all tensors before it.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from ..errors import BlobFormatError, ChecksumError

logger = logging.getLogger(__name__)

BLOB_FORMAT = "gridloc-blob"
BLOB_VERSION = 1
_DTYPE = np.dtype("<f4")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _paths(stem: Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_blob(stem: Path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    """Write ``tensors`` as f32 and return the manifest path."""
    manifest_path, bin_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, Any] = {}
    offset = 0
    with open(bin_path, "wb") as f:
        for name, array in tensors.items():
            payload = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
            f.write(payload)
            entries[name] = {
                "shape": list(np.shape(array)),
                "dtype": "f32",
                "byte_offset": offset,
                "byte_length": len(payload),
            }
            offset += len(payload)
    manifest = {
        "format": BLOB_FORMAT,
        "version": BLOB_VERSION,
        "blob": bin_path.name,
        "byte_order": "little",
        "sha256": sha256_file(bin_path),
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("wrote blob %s (%d tensors, %d bytes)", manifest_path, len(entries), offset)
    return manifest_path


def read_manifest(stem: Path) -> dict:
    manifest_path, _ = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"blob manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise BlobFormatError(f"{manifest_path}: invalid JSON ({e})") from None
    for key in ("format", "version", "blob", "tensors", "sha256"):
        if key not in manifest:
            raise BlobFormatError(f"{manifest_path}: missing key {key!r}")
    if manifest["format"] != BLOB_FORMAT or manifest["version"] != BLOB_VERSION:
        raise BlobFormatError(f"{manifest_path}: unsupported format {manifest['format']!r} v{manifest['version']}")
    if manifest.get("byte_order", "little") != "little":
        raise BlobFormatError(f"{manifest_path}: only little-endian payloads are supported")
    return manifest


def load_blob(stem: Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a blob back; returns (tensors, meta). Verifies the payload checksum."""
    manifest_path, _ = _paths(stem)
    manifest = read_manifest(manifest_path)
    bin_path = manifest_path.parent / manifest["blob"]
    if not bin_path.exists():
        raise FileNotFoundError(f"blob payload not found: {bin_path}")
    actual = sha256_file(bin_path)
    if actual != manifest["sha256"]:
        raise ChecksumError(bin_path, manifest["sha256"], actual)

    raw = bin_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        if entry.get("dtype") != "f32":
            raise BlobFormatError(f"{manifest_path}: tensor {name!r} has unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        start, length = entry["byte_offset"], entry["byte_length"]
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if length != expected or start + length > len(raw):
            raise BlobFormatError(f"{manifest_path}: tensor {name!r} extent does not match shape {shape}")
        tensors[name] = np.frombuffer(raw, dtype=_DTYPE, count=expected // _DTYPE.itemsize, offset=start).reshape(shape).copy()
    return tensors, manifest.get("meta", {})
