"""Manifest + blob checkpoint files.

Layout (one file)::

    UNIRECON-CKPT 1
    component <name>
    step <int>
    config_hash <hex>
    meta <key> <json value>          (zero or more)
    tensor <key> <shape> <offset> <length>
    ...
    end <total data bytes>
    <raw little-endian float32 data>

``shape`` is comma-separated dims, ``-`` for a scalar. Offsets are relative
to the first data byte. Tensors are written in sorted key order so identical
content gives identical bytes.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import DependencyError, InputError

MAGIC = "UNIRECON-CKPT"
FORMAT_VERSION = 1


@dataclass
class CheckpointManifest:
    component: str
    step: int
    config_hash: str
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)
    index: list = field(default_factory=list)  # (key, shape, offset, length)


def _shape_str(shape) -> str:
    return ",".join(str(int(d)) for d in shape) if len(shape) else "-"


def _parse_shape(s: str) -> tuple:
    return () if s == "-" else tuple(int(d) for d in s.split(","))


def encode_checkpoint(tensors: Mapping[str, np.ndarray], component: str, step: int,
                      config_hash: str, meta: Mapping | None = None) -> bytes:
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"component {component}", f"step {int(step)}",
             f"config_hash {config_hash}"]
    for k in sorted(meta or {}):
        lines.append(f"meta {k} {json.dumps(meta[k], sort_keys=True)}")
    blobs = []
    offset = 0
    for key in sorted(tensors):
        if any(c.isspace() for c in key):
            raise InputError(f"checkpoint key may not contain whitespace: {key!r}")
        arr = np.ascontiguousarray(np.asarray(tensors[key]), dtype="<f4")
        raw = arr.tobytes()
        lines.append(f"tensor {key} {_shape_str(arr.shape)} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append(f"end {offset}")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    pos = 0
    header = []
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise InputError("truncated checkpoint manifest")
        line = buf[pos:nl].decode("utf-8")
        pos = nl + 1
        header.append(line)
        if line.startswith("end "):
            break
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise InputError("not a checkpoint file")
    man = CheckpointManifest(component="", step=0, config_hash="", format_version=int(first[1]))
    for line in header[1:-1]:
        tag, rest = line.split(" ", 1)
        if tag == "component":
            man.component = rest
        elif tag == "step":
            man.step = int(rest)
        elif tag == "config_hash":
            man.config_hash = rest
        elif tag == "meta":
            k, v = rest.split(" ", 1)
            man.meta[k] = json.loads(v)
        elif tag == "tensor":
            key, shape, off, length = rest.split(" ")
            man.index.append((key, _parse_shape(shape), int(off), int(length)))
        else:
            raise InputError(f"unknown manifest line {line!r}")
    total = int(header[-1].split()[1])
    data = buf[pos:]
    if len(data) != total:
        raise InputError(f"checkpoint data length {len(data)} != manifest {total}")
    tensors = {}
    for key, shape, off, length in man.index:
        arr = np.frombuffer(data, dtype="<f4", count=length // 4, offset=off)
        tensors[key] = arr.reshape(shape).astype(np.float32)
    return man, tensors


def save_checkpoint(path, tensors, component, step, config_hash, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, component, step, config_hash, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, component: str | None = None, config_hash: str | None = None):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint not found: {path}")
    man, tensors = decode_checkpoint(path.read_bytes())
    if component is not None and man.component != component:
        raise DependencyError(f"{path} holds component {man.component!r}, expected {component!r}")
    if config_hash is not None and man.config_hash != config_hash:
        raise DependencyError(
            f"{path} was written for config {man.config_hash[:12]}, current is {config_hash[:12]}"
        )
    return man, tensors
