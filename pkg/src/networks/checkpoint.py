"""Versioned checkpoint container.

Layout::

    MAGIC (8 bytes) | manifest length (uint64 LE) | manifest JSON | tensor bytes | sha256 (32 bytes)

The manifest maps every tensor name to its shape, dtype and byte offset
inside the tensor section and carries the non-tensor fields (counters,
config snapshot, optimizer hyperparameters). Names and JSON keys are sorted
so that save -> load -> save reproduces the file byte for byte.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..core.errors import CheckpointError

logger = logging.getLogger("tpsr.checkpoint")

MAGIC = b"TPSRCKPT"
FORMAT_VERSION = 1

_DTYPES: Dict[str, Tuple[torch.dtype, np.dtype]] = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "int32": (torch.int32, np.dtype("<i4")),
    "uint8": (torch.uint8, np.dtype("u1")),
    "bool": (torch.bool, np.dtype("?")),
}
_NAMES = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


@dataclass
class Checkpoint:
    generator: Dict[str, torch.Tensor]
    discriminator: Dict[str, torch.Tensor]
    optim_g: Dict[str, Any] = field(default_factory=dict)
    optim_d: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    rng: Dict[str, torch.Tensor] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _flatten_optimizer(prefix: str, state_dict: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> Dict[str, Any]:
    """Move optimizer tensors into ``tensors``; return the JSON-able remainder."""
    if not state_dict:
        return {}
    slots: Dict[str, Dict[str, Any]] = {}
    for index, slot in state_dict["state"].items():
        scalars = {}
        for key, value in slot.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}/state/{index}/{key}"] = value
            else:
                scalars[key] = value
        slots[str(index)] = scalars
    return {"param_groups": state_dict["param_groups"], "scalars": slots}


def _unflatten_optimizer(prefix: str, meta: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> Dict[str, Any]:
    if not meta:
        return {}
    state: Dict[int, Dict[str, Any]] = {int(i): dict(scalars) for i, scalars in meta["scalars"].items()}
    marker = f"{prefix}/state/"
    for name, value in tensors.items():
        if name.startswith(marker):
            index, key = name[len(marker):].split("/", 1)
            state.setdefault(int(index), {})[key] = value
    return {"state": state, "param_groups": meta["param_groups"]}


def _encode(tensor: torch.Tensor) -> Tuple[str, List[int], bytes]:
    t = tensor.detach().cpu().contiguous()
    if t.dtype not in _NAMES:
        raise CheckpointError(f"Unsupported tensor dtype {t.dtype}")
    name = _NAMES[t.dtype]
    return name, list(t.shape), t.numpy().astype(_DTYPES[name][1], copy=False).tobytes()


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors: Dict[str, torch.Tensor] = {}
    for key, value in ckpt.generator.items():
        tensors[f"generator/{key}"] = value
    for key, value in ckpt.discriminator.items():
        tensors[f"discriminator/{key}"] = value
    for key, value in ckpt.rng.items():
        tensors[f"rng/{key}"] = value
    optim_g = _flatten_optimizer("optim_g", ckpt.optim_g, tensors)
    optim_d = _flatten_optimizer("optim_d", ckpt.optim_d, tensors)

    entries: Dict[str, Dict[str, Any]] = {}
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        dtype, shape, data = _encode(tensors[name])
        entries[name] = {"dtype": dtype, "shape": shape, "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format_version": ckpt.format_version,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "config": ckpt.config,
        "optim_g": optim_g,
        "optim_d": optim_d,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def deserialize_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + 8 + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"Not a checkpoint file: {source}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"Checkpoint checksum mismatch (corrupt file): {source}")

    (header_len,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    manifest = json.loads(body[start:start + header_len].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {manifest.get('format_version')} != supported {FORMAT_VERSION}: {source}"
        )

    payload = body[start + header_len:]
    tensors: Dict[str, torch.Tensor] = {}
    for name, entry in manifest["tensors"].items():
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[name] = torch.from_numpy(array).to(torch_dtype)

    def section(prefix: str) -> Dict[str, torch.Tensor]:
        marker = prefix + "/"
        return {name[len(marker):]: t for name, t in tensors.items() if name.startswith(marker)}

    return Checkpoint(
        generator=section("generator"),
        discriminator=section("discriminator"),
        optim_g=_unflatten_optimizer("optim_g", manifest["optim_g"], tensors),
        optim_d=_unflatten_optimizer("optim_d", manifest["optim_d"], tensors),
        epoch=int(manifest["epoch"]),
        step=int(manifest["step"]),
        config=manifest["config"],
        rng=section("rng"),
        format_version=int(manifest["format_version"]),
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    data = serialize_checkpoint(ckpt)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"Could not write checkpoint: {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} (epoch={ckpt.epoch}, step={ckpt.step}, {len(data)} bytes)")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        return deserialize_checkpoint(f.read(), source=path)


def apply_state(module: nn.Module, state: Dict[str, torch.Tensor], kind: str) -> None:
    """Load a state dict, reporting missing, unexpected or mis-shaped tensors by name."""
    expected = module.state_dict()
    for name, tensor in expected.items():
        if name not in state:
            raise CheckpointError(f"Checkpoint {kind} is missing tensor '{name}'")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Checkpoint {kind} tensor '{name}' has shape {tuple(state[name].shape)}, "
                f"model expects {tuple(tensor.shape)}"
            )
    unexpected = sorted(set(state) - set(expected))
    if unexpected:
        raise CheckpointError(f"Checkpoint {kind} has unexpected tensor '{unexpected[0]}'")
    module.load_state_dict(state)
