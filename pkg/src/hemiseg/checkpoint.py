"""Self-describing model checkpoints.

Layout: 8-byte magic, uint32 little-endian header length, a JSON header
holding the format version, the network config, and the array directory
(name, shape, byte offset, byte length), then one contiguous blob of raw
64-bit little-endian values.  Both trainable parameters and batch-norm
running statistics are stored.
"""
from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .model import Model, NetworkConfig, build_model

MAGIC = b"HSEGCKPT"
FORMAT_VERSION = 1


def _model_arrays(model: Model):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, buf in model.named_buffers():
        yield name, buf


def save_checkpoint(model: Model, path: str) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, arr in _model_arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "arrays": directory,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version "
                             f"{version} (expected {FORMAT_VERSION})")
        raw_config = dict(header["config"])
        raw_config["aspp_dilation_rates"] = tuple(raw_config["aspp_dilation_rates"])
        config = NetworkConfig(**raw_config)
        blob = fh.read()
    stored = {entry["name"]: entry for entry in header["arrays"]}
    model = build_model(config)
    for name, arr in _model_arrays(model):
        entry = stored.pop(name, None)
        if entry is None:
            raise ValueError(f"{path}: checkpoint is missing array {name!r}")
        if tuple(entry["shape"]) != arr.shape:
            raise ValueError(f"{path}: array {name!r} has shape {entry['shape']}, "
                             f"model expects {arr.shape}")
        start, length = entry["offset"], entry["length"]
        if start + length > len(blob) or length != arr.size * 8:
            raise ValueError(f"{path}: truncated or inconsistent data for {name!r}")
        values = np.frombuffer(blob[start:start + length], dtype="<f8")
        arr[...] = values.reshape(arr.shape)
    if stored:
        raise ValueError(f"{path}: checkpoint holds unknown arrays "
                         f"{sorted(stored)}")
    return model
