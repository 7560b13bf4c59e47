"""Versioned checkpoint container: JSON header + raw little-endian parameter arrays.

Layout::

    b"RDBCKPT\\n" | uint64 header length | UTF-8 JSON header | concatenated arrays

The header records the module kind, its architecture config, the training seed and
one ``{name, shape, dtype, offset, nbytes}`` entry per tensor. Byte output depends
only on the parameters and metadata, so identical training runs give identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from .dynamics import DynamicsConfig, GlobalDynamics
from .encoder import EncoderConfig, SpatialEncoder
from .predictor import LocalPredictor, PredictorConfig

MAGIC = b"RDBCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CompatibilityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "R", "D" or "B"
    model: nn.Module
    seed: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.model.cfg.to_dict()


def _config_cls(kind: str):
    return {"R": (EncoderConfig, SpatialEncoder), "D": (DynamicsConfig, GlobalDynamics),
            "B": (PredictorConfig, LocalPredictor)}[kind]


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, t in ckpt.model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<")))
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "rdb-checkpoint", "version": VERSION, "kind": ckpt.kind, "config": ckpt.config,
              "seed": int(ckpt.seed), "meta": ckpt.meta, "tensors": tensors}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not an rdb checkpoint")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    cfg_cls, model_cls = _config_cls(header["kind"])
    model = model_cls(cfg_cls.from_dict(header["config"]))
    body = data[start + hlen:]
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype=np.dtype(t["dtype"]))
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    model.load_state_dict(state)
    return Checkpoint(header["kind"], model, header["seed"], header.get("meta", {}))


def save(ckpt: Checkpoint, path) -> str:
    """Write atomically; returns the sha256 of the file."""
    data = to_bytes(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path, kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ckpt = from_bytes(path.read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path} holds a {ckpt.kind} checkpoint, expected {kind}")
    return ckpt


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def check_compatible(r: Optional[Checkpoint], d: Optional[Checkpoint], b: Optional[Checkpoint]) -> None:
    """Raise CompatibilityError when latent/summary widths disagree across modules."""
    if r is not None and d is not None and r.model.cfg.latent_dim != d.model.cfg.latent_dim:
        raise CompatibilityError(f"R latent {r.model.cfg.latent_dim} != D latent {d.model.cfg.latent_dim}")
    if b is None:
        return
    ic = b.model.input_config
    if ic.uses_latent:
        if r is None:
            raise CompatibilityError(f"B({ic.value}) needs an R checkpoint")
        if r.model.cfg.latent_dim != b.model.cfg.latent_dim:
            raise CompatibilityError(f"R latent {r.model.cfg.latent_dim} != B latent {b.model.cfg.latent_dim}")
    if ic.uses_summary:
        if d is None:
            raise CompatibilityError(f"B({ic.value}) needs a D checkpoint")
        if d.model.cfg.hidden_dim != b.model.cfg.summary_dim:
            raise CompatibilityError(f"D summary {d.model.cfg.hidden_dim} != B summary {b.model.cfg.summary_dim}")
        if r is None:
            raise CompatibilityError("D context needs an R checkpoint")
        if d.model.cfg.latent_dim != b.model.cfg.latent_dim:
            raise CompatibilityError(f"D latent {d.model.cfg.latent_dim} != B latent {b.model.cfg.latent_dim}")
