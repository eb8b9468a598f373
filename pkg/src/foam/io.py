"""On-disk formats: tensor binaries, 8-bit PGM rasters, parameter manifests."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from foam.tensor import Tensor

MAGIC = b"FOAMTNSR"


def encode_tensor(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise ValueError("not a FOAM tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 4 * count:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {4 * count} for shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D array already scaled to [0, 255] as binary PGM (P5)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    pix = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("only binary PGM (P5) is supported")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    # exactly one whitespace byte separates the header from the pixels
    pixels = raw[m.end() : m.end() + w * h]
    if len(pixels) != w * h:
        raise ValueError(f"truncated PGM: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def to_unit_range(img: np.ndarray) -> np.ndarray:
    """Min-max stretch to [0, 255]; constant images map to 0."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return 255.0 * (img - lo) / (hi - lo)


def log_magnitude_image(m: np.ndarray) -> np.ndarray:
    """255 * log(1 + M) / log(1 + max M)."""
    m = np.asarray(m, dtype=np.float64)
    top = m.max()
    if top <= 0:
        return np.zeros_like(m)
    return 255.0 * np.log1p(m) / np.log1p(top)


def save_params(directory, named: dict[str, Tensor], extra: dict[str, dict] | None = None, meta: dict | None = None) -> Path:
    """Write each parameter as ``<name>.tns`` and a ``manifest.json`` index.

    ``extra`` maps parameter names to additional manifest fields (e.g. dilation).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, t in named.items():
        fname = f"{name}.tns"
        save_tensor(d / fname, t)
        entry = {"file": fname, "shape": list(t.shape)}
        if extra and name in extra:
            entry.update(extra[name])
        entries[name] = entry
    manifest = {"format": "foam-params/1", "params": entries}
    if meta:
        manifest["meta"] = meta
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d / "manifest.json"


def load_params(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    arrays = {}
    for name, entry in manifest["params"].items():
        arr = load_tensor(d / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise ValueError(f"{name}: manifest shape {entry['shape']} != file shape {list(arr.shape)}")
        arrays[name] = arr
    return arrays, manifest
