"""Versioned binary checkpoints with per-tensor checksums.

Layout:

    EVACKPT1\\n
    [config]\\n
    <key>=<value>\\n ...          (values are JSON-escaped strings)
    [tensors]\\n
    <name> <d0xd1x...> <byte offset> <crc32>\\n ...
    [data]\\n
    <raw little-endian float64 payload>

Offsets index into the payload. Every tensor's CRC32 is verified on load, so
a corrupted file fails loudly instead of producing a silently wrong model.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"EVACKPT1"


@dataclass
class Checkpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray]


def save_checkpoint(path, config: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    header = [MAGIC.decode("ascii"), "[config]"]
    for key in config:
        if any(c in key for c in "=\n "):
            raise CheckpointError(f"config key {key!r} may not contain '=', spaces, or newlines")
        header.append(f"{key}={json.dumps(config[key])}")
    header.append("[tensors]")
    blobs: list[bytes] = []
    offset = 0
    for name, array in tensors.items():
        if " " in name or "\n" in name:
            raise CheckpointError(f"tensor name {name!r} may not contain spaces or newlines")
        arr = np.asarray(array, dtype=np.float64)
        raw = arr.astype("<f8").tobytes()
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        crc = zlib.crc32(raw) & 0xFFFFFFFF
        header.append(f"{name} {shape} {offset} {crc}")
        blobs.append(raw)
        offset += len(raw)
    header.append("[data]")
    Path(path).write_bytes("\n".join(header).encode("ascii") + b"\n" + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC + b"\n"):
        raise CheckpointError(
            f"{path}: bad magic {blob[:8]!r}; this reader understands {MAGIC.decode()} only"
        )
    marker = blob.find(b"\n[data]\n")
    if marker < 0:
        raise CheckpointError(f"{path}: truncated header, no [data] section")
    header_lines = blob[len(MAGIC) + 1 : marker].decode("ascii").split("\n")
    payload = blob[marker + len(b"\n[data]\n") :]

    config: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    section = None
    for line in header_lines:
        if line == "[config]":
            section = "config"
            continue
        if line == "[tensors]":
            section = "tensors"
            continue
        if section == "config":
            key, _, value = line.partition("=")
            try:
                config[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"{path}: bad config line {line!r}") from exc
        elif section == "tensors":
            parts = line.split(" ")
            if len(parts) != 4:
                raise CheckpointError(f"{path}: bad tensor directory line {line!r}")
            name, shape_text, offset_text, crc_text = parts
            shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
            count = int(np.prod(shape)) if shape else 1
            offset = int(offset_text)
            raw = payload[offset : offset + 8 * count]
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: payload truncated for tensor {name!r}")
            if (zlib.crc32(raw) & 0xFFFFFFFF) != int(crc_text):
                raise CheckpointError(f"{path}: checksum failure for tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        else:
            raise CheckpointError(f"{path}: stray header line {line!r}")
    return Checkpoint(config=config, tensors=tensors)


def load_params_into(
    named_params: list[tuple[str, Tensor]],
    tensors: dict[str, np.ndarray],
    prefix: str,
) -> None:
    """Copy stored arrays under ``prefix`` into live parameters.

    Any missing, extra, or shape-mismatched tensor fails with a full diff so
    a config/checkpoint mismatch is obvious.
    """
    problems = []
    for name, param in named_params:
        key = prefix + name
        if key not in tensors:
            problems.append(f"missing tensor {key!r}")
        elif tensors[key].shape != param.data.shape:
            problems.append(
                f"shape mismatch for {key!r}: checkpoint {tensors[key].shape} "
                f"vs model {param.data.shape}"
            )
    stored = {k for k in tensors if k.startswith(prefix)}
    expected = {prefix + name for name, _ in named_params}
    for extra in sorted(stored - expected):
        problems.append(f"unexpected tensor {extra!r}")
    if problems:
        raise CheckpointError("checkpoint/model mismatch: " + "; ".join(problems))
    for name, param in named_params:
        param.data = tensors[prefix + name].copy()
