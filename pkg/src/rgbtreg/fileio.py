"""File formats: PNG images, optical-flow files and weight checkpoints."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ContractError, DataError, SchemaError

FLO_MAGIC = 202021.25
CHECKPOINT_MAGIC = b"RTCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG into a (3, H, W) float64 array in [0, 1].

    Grayscale images are replicated to three channels; alpha is dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode in ("L", "RGB", "RGBA", "LA"):
            if im.mode != "RGB" and im.mode != "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3)
    else:
        arr = arr.transpose(2, 0, 1)[:3]
    return np.clip(arr, 0.0, 1.0)


def write_png(path, data: np.ndarray) -> None:
    """Write a (3, H, W) or (H, W) float array in [0, 1] as an 8-bit PNG."""
    data = np.asarray(data, dtype=np.float64)
    if data.min() < -1e-9 or data.max() > 1.0 + 1e-9:
        raise ContractError(f"png data must lie in [0, 1], got [{data.min()}, {data.max()}]")
    quantized = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if quantized.ndim == 3:
        im = PILImage.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    elif quantized.ndim == 2:
        im = PILImage.fromarray(quantized, mode="L")
    else:
        raise ContractError(f"png data must be (3, H, W) or (H, W), got {data.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")


# ---------------------------------------------------------------------------
# .flo optical flow files
# ---------------------------------------------------------------------------


def write_flo(path, flow: np.ndarray) -> None:
    """Write a (2, H, W) flow as a little-endian float32 .flo file."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ContractError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    interleaved = flow.transpose(1, 2, 0).astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.float32(FLO_MAGIC).tobytes())
        f.write(struct.pack("<ii", w, h))
        f.write(interleaved.tobytes())


def read_flo(path) -> np.ndarray:
    """Read a .flo file into a (2, H, W) float64 array; validates the magic."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"flow file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise SchemaError(f"flow file too short: {path}")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise SchemaError(f"bad flow magic {magic!r} in {path}")
    w, h = struct.unpack_from("<ii", raw, 4)
    expected = 12 + 4 * 2 * h * w
    if w <= 0 or h <= 0 or len(raw) != expected:
        raise SchemaError(f"flow file size mismatch in {path}: {len(raw)} != {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float64)


# ---------------------------------------------------------------------------
# weight checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 tensors plus a JSON metadata header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            name_b = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; raises SchemaError on any structural problem."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    view = memoryview(raw)
    if len(raw) < 12 or bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise SchemaError(f"not a checkpoint file: {path}")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version} in {path}")
    offset = 12
    try:
        meta = json.loads(bytes(view[offset : offset + meta_len]).decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = bytes(view[offset : offset + name_len]).decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            n_bytes = 8 * int(np.prod(shape)) if ndim else 8
            data = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=offset)
            offset += n_bytes
            arrays[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"truncated or corrupt checkpoint {path}: {exc}") from exc
    if offset != len(raw):
        raise SchemaError(f"trailing bytes in checkpoint {path}")
    return arrays, meta
