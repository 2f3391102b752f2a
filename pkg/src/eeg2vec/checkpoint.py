"""Model checkpoints: a JSON header followed by float64 tensors.

Layout::

    b"E2VC"  magic
    uint32   header byte length (little-endian)
    bytes    UTF-8 JSON: {"version", "kind", "config", "provenance",
                          "tensors": [{"name", "shape", "dtype"}, ...]}
    float64  tensor payloads, little-endian, in header order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"E2VC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    kind: str
    config: dict
    state: "OrderedDict[str, np.ndarray]"
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, kind: str, config: dict, module: torch.nn.Module, **provenance):
        state = OrderedDict(
            (k, v.detach().cpu().numpy().astype(np.float64)) for k, v in module.state_dict().items()
        )
        return cls(kind, config, state, dict(provenance))

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        """Copy tensors into ``module`` after checking names and shapes."""
        target = module.state_dict()
        missing = set(target) - set(self.state)
        extra = set(self.state) - set(target)
        if missing or extra:
            raise CheckpointError(f"tensor names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        new = OrderedDict()
        for name, ref in target.items():
            arr = self.state[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(ref.shape)}")
            new[name] = torch.as_tensor(arr).to(ref.dtype)
        module.load_state_dict(new)
        return module

    def save(self, path) -> None:
        tensors = [
            {"name": k, "shape": list(v.shape)} for k, v in self.state.items()
        ]
        header = {
            "version": VERSION,
            "kind": self.kind,
            "config": self.config,
            "provenance": self.provenance,
            "tensors": tensors,
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(hbytes)))
            fh.write(hbytes)
            for v in self.state.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC or len(buf) < 8:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", buf[4:8])
        try:
            header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: malformed header") from exc
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        offset = 8 + hlen
        state = OrderedDict()
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            end = offset + 8 * count
            if end > len(buf):
                raise CheckpointError(f"{path}: truncated at tensor {t['name']}")
            state[t["name"]] = np.frombuffer(buf, "<f8", count, offset).reshape(t["shape"]).copy()
            offset = end
        if offset != len(buf):
            raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
        return cls(header["kind"], header["config"], state, header.get("provenance", {}))
