"""File formats: 8-bit sRGB PNG, little-endian PFM, CSV logs, checkpoints.

The checkpoint is a single file: magic ``DPGS1``, a little-endian uint32
header length, a JSON header (config, water profile, iteration, slot table)
and a float64 little-endian payload holding every parameter slot.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .core import linear_to_srgb, srgb_to_linear
from .tape import ParamVector

CHECKPOINT_MAGIC = b"DPGS1"


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    """Write a linear-RGB color field as 8-bit sRGB PNG."""
    srgb = linear_to_srgb(image)
    data = np.round(srgb * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(str(path))


def load_png(path) -> np.ndarray:
    """Read an 8-bit sRGB PNG into a linear-RGB color field in [0, 1]."""
    img = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float64) / 255.0
    return np.clip(srgb_to_linear(img), 0.0, 1.0)


def save_pfm(path, field: np.ndarray) -> None:
    """Write a scalar (Pf) or 3-channel (PF) float map, little-endian."""
    field = np.asarray(field, dtype=np.float32)
    if field.ndim == 2:
        header = b"Pf\n"
    elif field.ndim == 3 and field.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {field.shape}")
    h, w = field.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")                     # negative scale: little-endian
        f.write(np.flipud(field).tobytes())    # PFM stores bottom-up

def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    channels = 3 if kind == b"PF" else 1
    data = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.flipud(data).astype(np.float64)


# ---------------------------------------------------------------------------
# CSV logs
# ---------------------------------------------------------------------------

def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def append_csv(path, header: list[str], row) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(header)
        writer.writerow(row)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ParamVector, header_extra: dict) -> None:
    """Serialize a ParamVector plus JSON metadata (config, profile, iteration)."""
    slots = [
        {"name": n, "offset": params.layout[n][0], "size": params.layout[n][1],
         "shape": list(params.shapes[n])}
        for n in params.names()
    ]
    header = dict(header_extra)
    header["slots"] = slots
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array(len(blob), dtype="<u4").tobytes())
        f.write(blob)
        f.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (params: ParamVector, header: dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        (hlen,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(hlen)).decode())
        payload = np.frombuffer(f.read(), dtype="<f8")
    slots = {}
    for s in header["slots"]:
        arr = payload[s["offset"]:s["offset"] + s["size"]].reshape(s["shape"])
        slots[s["name"]] = arr.copy()
    return ParamVector(slots), header
