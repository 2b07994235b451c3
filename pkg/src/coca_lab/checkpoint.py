"""Single-file checkpoint container.

Layout::

    b"COCACKPT"                      8-byte magic
    uint64 little-endian             header length H
    H bytes UTF-8 JSON header        keys sorted, no whitespace
    payloads                         float32 little-endian, manifest order

The header holds ``format`` (version), ``config`` (model config dict),
``step``, ``rng_state`` (base64), ``extra`` (free-form JSON) and
``tensors``: a list of ``{name, shape, offset, nbytes}`` where ``offset``
counts from the first payload byte. Optimizer moments are stored as ordinary
tensors named ``optim.m.<param>`` and ``optim.v.<param>``.
"""

from __future__ import annotations

import base64
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InputError, StateError

MAGIC = b"COCACKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    step: int = 0
    rng_state: bytes = b""
    extra: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}

    def optimizer_state(self) -> dict:
        m = {k[len("optim.m."):]: v for k, v in self.tensors.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: v for k, v in self.tensors.items() if k.startswith("optim.v.")}
        return {"m": m, "v": v, "step": int(self.extra.get("optim_step", 0))}


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, payloads, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)
    header = {
        "format": FORMAT_VERSION,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": base64.b64encode(ckpt.rng_state).decode("ascii"),
        "extra": ckpt.extra,
        "tensors": manifest,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(payloads)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format {header.get('format')}")
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = buf[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise InputError(f"truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return Checkpoint(
        config=header["config"],
        tensors=tensors,
        step=header["step"],
        rng_state=base64.b64decode(header["rng_state"]),
        extra=header.get("extra", {}),
    )


def save(path, ckpt: Checkpoint) -> Path:
    """Atomic write (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def model_checkpoint(model, step: int = 0, optim_state=None, rng_state: bytes = b"", extra=None) -> Checkpoint:
    tensors = {n: p.detach() for n, p in model.named_parameters()}
    extra = dict(extra or {})
    if optim_state is not None:
        for n in list(tensors):
            if n in optim_state["m"]:
                tensors[f"optim.m.{n}"] = optim_state["m"][n]
                tensors[f"optim.v.{n}"] = optim_state["v"][n]
        extra["optim_step"] = int(optim_state["step"])
    return Checkpoint(model.cfg.to_dict(), tensors, step, rng_state, extra)


def load_model(source):
    """Rebuild a model from a checkpoint path or object."""
    from .model import CocaLM, ModelConfig

    ckpt = source if isinstance(source, Checkpoint) else load(source)
    model = CocaLM(ModelConfig.from_dict(ckpt.config))
    restore_params(model, ckpt)
    return model, ckpt


def restore_params(model, ckpt: Checkpoint):
    params = ckpt.params()
    names = [n for n, _ in model.named_parameters()]
    if sorted(names) != sorted(params):
        missing = set(names) ^ set(params)
        raise StateError(f"checkpoint parameters do not match model: {sorted(missing)[:5]}")
    with torch.no_grad():
        for n, p in model.named_parameters():
            src = params[n]
            if tuple(src.shape) != tuple(p.shape):
                raise StateError(f"shape mismatch for {n}: {src.shape} vs {tuple(p.shape)}")
            p.copy_(torch.as_tensor(src).to(p.dtype))


__all__ = [
    "Checkpoint",
    "FORMAT_VERSION",
    "MAGIC",
    "from_bytes",
    "load",
    "load_model",
    "model_checkpoint",
    "restore_params",
    "save",
    "to_bytes",
]
