"""On-disk formats: raw tensor files, PNG samples, JSON documents, checkpoints.

TensorFile layout (all little-endian)::

    b"SOTA" | version:u16 | dtype:u8 | rank:u8 | dims:u32 * rank | payload

dtype tags: 0 = float32, 1 = uint8. Payload is row-major.

A checkpoint is a zip archive holding ``meta.json``, base weights under
``weights/`` and LoRA adapter matrices under ``adapters/``, each entry a
TensorFile. Zip entries carry a fixed timestamp so identical content gives
identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

MAGIC = b"SOTA"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}; TensorFile stores float32 or uint8")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    tag = _TAGS[arr.dtype]
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes(order="C")
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("bad magic; not a TensorFile")
    version, tag, rank = struct.unpack_from("<HBB", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported TensorFile version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    offset = 8 + 4 * rank
    if len(data) < offset:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    dtype = _DTYPES[tag]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(f"payload length {len(data) - offset} != {expected} for dims {dims}")
    arr = np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- PNG samples


def save_png(path: str | Path, array: np.ndarray) -> None:
    """Write an 8-bit PNG.

    3xHxW floats in [0,1] and HxWx3 uint8 become RGB; HxW uint8 stays grey.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.dtype == np.uint8 and arr.shape[-1] == 3:
        img = Image.fromarray(arr, mode="RGB")
    elif arr.ndim == 3:
        rgb = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        img = Image.fromarray(rgb, mode="RGB")
    elif arr.ndim == 2:
        img = Image.fromarray(arr.astype(np.uint8), mode="L")
    else:
        raise FormatError(f"cannot write array of shape {arr.shape} as PNG")
    img.save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: str | Path, rgb: bool) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.array(img)
    if rgb:
        if arr.ndim != 3:
            raise FormatError(f"{path}: expected RGB image")
        return unit_float(arr[..., :3].transpose(2, 0, 1))
    return arr.astype(np.uint8)


def unit_float(levels: np.ndarray) -> np.ndarray:
    """8-bit levels to float32 in [0, 1]; the single conversion used everywhere."""
    return np.asarray(levels, dtype=np.uint8).astype(np.float32) / np.float32(255.0)


def write_sample(root: Path, sample) -> dict:
    from .synthesis import SAMPLE_FILES

    entry = {"index": sample.index}
    stem = f"{sample.index:06d}.png"
    for attr, sub in SAMPLE_FILES.items():
        rel = f"{sub}/{stem}"
        try:
            save_png(root / rel, getattr(sample, attr))
        except OSError as exc:
            raise OSError(f"failed writing {root / rel}: {exc}") from exc
        entry[attr] = rel
    return entry


def read_sample(root: Path, entry: Mapping[str, Any]):
    from .synthesis import SAMPLE_FILES, SceneSample

    arrays = {}
    for attr in SAMPLE_FILES:
        path = root / entry[attr]
        if not path.exists():
            raise FileNotFoundError(f"missing sample file: {path}")
        arrays[attr] = load_png(path, rgb=(attr == "image"))
    return SceneSample(index=int(entry["index"]), **arrays)


# ---------------------------------------------------------------- checkpoints


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    weights: Mapping[str, np.ndarray],
    meta: Mapping[str, Any],
    adapters: Mapping[str, np.ndarray] | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    adapters = dict(adapters or {})
    meta = dict(meta)
    meta["adapter_manifest"] = sorted(adapters)
    meta["weights"] = sorted(weights)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode("utf-8"))
        for name in sorted(weights):
            _zip_write(zf, f"weights/{name}.sota", encode_tensor(weights[name]))
        for name in sorted(adapters):
            _zip_write(zf, f"adapters/{name}.sota", encode_tensor(adapters[name]))
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            weights = {n: decode_tensor(zf.read(f"weights/{n}.sota")) for n in meta["weights"]}
            adapters = {n: decode_tensor(zf.read(f"adapters/{n}.sota")) for n in meta["adapter_manifest"]}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    return weights, adapters, meta
