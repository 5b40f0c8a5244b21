"""VCKP checkpoint files.

Layout (little-endian)::

    0   4 bytes   magic b"VCKP"
    4   u32       format version (1)
    8   u32       header length L
    12  L bytes   UTF-8 JSON header: {"config", "meta", "sections"}
    ..  f32[]     every section's arrays, flattened, in header order

The ``backbone`` section always comes first and holds the network parameters
in deterministic layer order.  Further sections (Siamese head, optimizer
moments) are present only in resumable training checkpoints.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .segnet import SegNet, SegNetConfig, _layer_shapes
from .autodiff import Tensor

MAGIC = b"VCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    sections: "OrderedDict[str, List[np.ndarray]]"
    meta: dict = field(default_factory=dict)

    @property
    def segnet_config(self) -> SegNetConfig:
        return SegNetConfig.from_dict(self.config["segnet"])


def _header_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "sections": [
            {"name": name, "shapes": [list(a.shape) for a in arrays]} for name, arrays in ckpt.sections.items()
        ],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    if next(iter(ckpt.sections), None) != "backbone":
        raise CheckpointError("the first section must be 'backbone'")
    header = _header_bytes(ckpt)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for arrays in ckpt.sections.values():
        for a in arrays:
            parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise CheckpointError(f"file too short for a VCKP header ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at offset 0, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    if 12 + hlen > len(buf):
        raise CheckpointError(f"header of {hlen} bytes runs past end of file")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header at offset 12: {exc}") from exc
    offset = 12 + hlen
    sections: "OrderedDict[str, List[np.ndarray]]" = OrderedDict()
    for sec in header["sections"]:
        arrays = []
        for shape in sec["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            end = offset + 4 * n
            if end > len(buf):
                raise CheckpointError(f"payload truncated in section {sec['name']!r} at offset {offset}")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape))
            offset = end
        sections[sec["name"]] = arrays
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after payload")
    return Checkpoint(config=header["config"], sections=sections, meta=header.get("meta", {}))


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def segnet_checkpoint(net: SegNet, meta: dict | None = None, extra: Dict[str, List[np.ndarray]] | None = None) -> Checkpoint:
    sections: "OrderedDict[str, List[np.ndarray]]" = OrderedDict(backbone=[p.data.copy() for p in net.parameters()])
    for name, arrays in (extra or {}).items():
        sections[name] = [np.asarray(a, np.float32).copy() for a in arrays]
    return Checkpoint(config={"segnet": net.config.to_dict()}, sections=sections, meta=dict(meta or {}))


def load_segnet(ckpt: Checkpoint, expected: SegNetConfig | None = None) -> SegNet:
    """Rebuild the backbone; reject a checkpoint that disagrees with ``expected``."""
    cfg = ckpt.segnet_config
    if expected is not None and expected != cfg:
        raise CheckpointError(f"checkpoint network config {cfg} does not match requested {expected}")
    arrays = ckpt.sections["backbone"]
    names = []
    for name, shape in _layer_shapes(cfg):
        names.append((f"{name}.weight", shape))
        names.append((f"{name}.bias", (shape[0],)))
    if len(arrays) != len(names):
        raise CheckpointError(f"backbone holds {len(arrays)} arrays, config needs {len(names)}")
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for (name, shape), a in zip(names, arrays):
        if tuple(a.shape) != tuple(shape):
            raise CheckpointError(f"{name}: stored shape {a.shape} != expected {shape}")
        params[name] = Tensor(a.copy(), requires_grad=True)
    return SegNet(cfg, params)
