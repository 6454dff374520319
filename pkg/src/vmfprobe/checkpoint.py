"""Encoder checkpoint files.

Byte layout (all integers and floats little-endian)::

    offset 0      9 bytes   magic b"VMFPROBE1"
    offset 9      4 bytes   uint32 header length H
    offset 13     H bytes   UTF-8 JSON header, keys sorted:
                            {"format_version": 1,
                             "config": {...EncoderConfig fields...},
                             "params": [[name, [dims...]], ...]}
    offset 13+H   8*P bytes float64 parameters, concatenated in declaration
                            order, each array row-major

Loading validates the magic string, the format version and every parameter
shape against the stored config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diff import ShapeError
from .model import Encoder, EncoderConfig, layer_shapes

MAGIC = b"VMFPROBE1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(encoder: Encoder, path) -> Path:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "config": encoder.config.to_dict(),
        "params": [[name, list(shape)] for name, shape in layer_shapes(encoder.config)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in encoder.params)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + body)
    return path


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic string)")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    return header, raw[start + hlen :]


def load(path) -> Encoder:
    header, body = _read(path)
    config = EncoderConfig.from_dict(header["config"])
    shapes = layer_shapes(config)
    stored = [(n, tuple(s)) for n, s in header["params"]]
    if stored != shapes:
        raise ShapeError(f"{path}: parameter table does not match its config")
    values = np.frombuffer(body, dtype="<f8")
    expected = sum(int(np.prod(s)) for _, s in shapes)
    if values.size != expected:
        raise ShapeError(f"{path}: {values.size} stored parameters, config needs {expected}")
    enc = Encoder(config)
    enc.set_flat(values.astype(np.float64))
    return enc


def load_into(encoder: Encoder, path) -> Encoder:
    """Copy checkpoint parameters into ``encoder``; shapes must match exactly."""
    loaded = load(path)
    mine = layer_shapes(encoder.config)
    theirs = layer_shapes(loaded.config)
    if mine != theirs:
        diffs = [f"{a[0]} {a[1]} vs {b[1]}" for a, b in zip(mine, theirs) if a != b]
        raise ShapeError("checkpoint shapes do not match encoder: " + "; ".join(diffs or ["layer count"]))
    encoder.params = [p.copy() for p in loaded.params]
    return encoder
