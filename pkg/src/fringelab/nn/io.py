"""Weights files and loss-curve CSVs.

Weights file layout: the magic line ``FPNN1``, one line of JSON
``{"spec": {...}, "tensors": [[name, shape], ...], "meta": {...}}``, then the
tensors as little-endian float32 blobs in header order.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import ModelSpec, param_shapes

MAGIC = b"FPNN1\n"


def save_weights(path, spec: ModelSpec, params: dict, meta: dict | None = None) -> None:
    header = {
        "spec": spec.to_dict(),
        "tensors": [[name, list(arr.shape)] for name, arr in params.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path, dtype: str | None = None) -> tuple[ModelSpec, dict, dict]:
    """Returns ``(spec, params, meta)``; tensors are cast to ``dtype`` (default: the spec's)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError("not an FPNN1 weights file")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : end])
    spec = ModelSpec.from_dict(header["spec"])
    expected = {k: tuple(v) for k, v in param_shapes(spec).items()}
    offset = end + 1
    params = {}
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise ValueError(f"tensor {name} has shape {shape}, spec wants {expected.get(name)}")
        n = int(np.prod(shape))
        if offset + 4 * n > len(raw):
            raise ValueError("weights file is truncated or has extra data")
        blob = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        params[name] = blob.reshape(shape).astype(dtype or spec.dtype)
        offset += 4 * n
    if offset != len(raw) or set(params) != set(expected):
        raise ValueError("weights file is truncated or has extra data")
    return spec, params, header.get("meta", {})


def write_loss_csv(path, curve) -> None:
    """``curve`` is a list of ``(epoch, train_loss, val_loss)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in curve:
            w.writerow([int(epoch), repr(float(tr)), repr(float(va))])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in rows]
