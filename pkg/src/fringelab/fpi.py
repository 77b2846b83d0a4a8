"""File formats: FPI1 float images and ASCII PLY point clouds.

FPI1 layout: an ASCII header line ``FPI1 <width> <height> <channels>\\n``
followed by little-endian float32 samples, row-major, channel-interleaved.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"FPI1"


def write_fpi(path, data) -> None:
    """Write a ``(H, W)`` or ``(H, W, C)`` array as an FPI1 file."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("FPI1 images must be 2-D or 3-D arrays")
    h, w, c = arr.shape
    header = f"FPI1 {w} {h} {c}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_fpi(path, squeeze: bool = True) -> np.ndarray:
    """Read an FPI1 file; single-channel images come back as ``(H, W)``."""
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    parts = raw[:end].split()
    if len(parts) != 4 or parts[0] != MAGIC:
        raise ValueError(f"{path}: not an FPI1 file")
    w, h, c = (int(p) for p in parts[1:])
    body = np.frombuffer(raw, dtype="<f4", offset=end + 1)
    if body.size != w * h * c:
        raise ValueError(f"{path}: truncated FPI1 payload")
    arr = body.reshape(h, w, c).astype(np.float64)
    if squeeze and c == 1:
        return arr[:, :, 0]
    return arr


def write_ply(path, points) -> None:
    """ASCII PLY with x, y, z vertex properties (mm)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    body = "\n".join(f"{x:.9f} {y:.9f} {z:.9f}" for x, y, z in pts)
    Path(path).write_text("\n".join(lines) + "\n" + body + ("\n" if len(pts) else ""))


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    n = 0
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            rows = text[i + 1 : i + 1 + n]
            if not rows:
                return np.zeros((0, 3))
            return np.array([[float(v) for v in r.split()] for r in rows])
    raise ValueError(f"{path}: missing PLY header")
