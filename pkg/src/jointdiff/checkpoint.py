"""Binary checkpoint container and model (de)serialization.

Layout, little-endian throughout:

    magic   4 bytes  "UCKP"
    version u32      (currently 1)
    metadata u32 length + UTF-8 JSON (canonical: sorted keys)
    tensors, repeated until EOF:
        u32 name length + UTF-8 dotted name
        u8  dtype tag (0 = f32)
        u32 rank
        u64 per dimension
        payload (prod(dims) * 4 bytes of f32)

Tensors are written in sorted name order and metadata JSON is canonical, so
save -> load -> save is byte-identical. Schedules are stored as their recipe
(T, beta_start, beta_end, kind), never as tables. Adapter checkpoints
(kind="adapter") may contain only adapter/proj_out/joint-LoRA tensors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adapters import AdapterSet, base_fingerprint
from .errors import CheckpointError
from .model import BaseDenoiser, DenoiserConfig, JointDenoiser
from .schedule import NoiseSchedule, make_schedule

MAGIC = b"UCKP"
VERSION = 1
DTYPE_F32 = 0
_ADAPTER_PREFIXES = ("y_lora.", "xy_lora.", "yx_lora.", "proj_out.")


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict  # name -> np.ndarray (float32)

    @property
    def kind(self) -> str:
        return self.metadata.get("kind", "base")


def _validate(metadata: dict, tensors: dict) -> None:
    if len(set(tensors)) != len(tensors):
        raise CheckpointError("duplicate tensor names")
    if metadata.get("kind") == "adapter":
        bad = [n for n in tensors if not n.startswith(_ADAPTER_PREFIXES)]
        if bad:
            raise CheckpointError(f"adapter checkpoint may not carry base tensors: {bad[:3]}")


def save_checkpoint(path, metadata: dict, tensors: dict) -> None:
    _validate(metadata, tensors)
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
            name_b = name.encode()
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", DTYPE_F32))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 8)
    off = 12
    metadata = json.loads(data[off : off + meta_len].decode())
    off += meta_len

    tensors: dict = {}
    while off < len(data):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode()
        off += name_len
        (tag,) = struct.unpack_from("<B", data, off)
        off += 1
        if tag != DTYPE_F32:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        payload = count * 4
        if off + payload > len(data):
            raise CheckpointError(f"truncated payload for tensor {name!r}")
        arr = np.frombuffer(data[off : off + payload], dtype="<f4").reshape(dims).copy()
        off += payload
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    _validate(metadata, tensors)
    return Checkpoint(metadata=metadata, tensors=tensors)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _state_to_numpy(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def save_base_checkpoint(path, base: BaseDenoiser, schedule: NoiseSchedule, provenance: dict | None = None) -> None:
    metadata = {
        "kind": "base",
        "model": base.cfg.to_dict(),
        "schedule": schedule.recipe(),
        "fingerprint": base_fingerprint(base),
        "provenance": provenance or {},
    }
    save_checkpoint(path, metadata, _state_to_numpy(base))


def save_adapter_checkpoint(
    path, adapter_set: AdapterSet, model_cfg: DenoiserConfig, schedule: NoiseSchedule, provenance: dict | None = None
) -> None:
    metadata = {
        "kind": "adapter",
        "adapter": adapter_set.metadata(),
        "model": model_cfg.to_dict(),
        "schedule": schedule.recipe(),
        "provenance": provenance or {},
    }
    save_checkpoint(path, metadata, _state_to_numpy(adapter_set))


def _load_state(module: torch.nn.Module, tensors: dict, what: str) -> None:
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{what} tensors do not fit the model: {exc}") from exc


def load_base(ckpt: Checkpoint) -> tuple[BaseDenoiser, NoiseSchedule]:
    if ckpt.kind != "base":
        raise CheckpointError(f"expected a base checkpoint, got kind={ckpt.kind!r}")
    schedule = make_schedule(**ckpt.metadata["schedule"])
    cfg = DenoiserConfig(**ckpt.metadata["model"])
    base = BaseDenoiser(cfg, t_max=schedule.T)
    _load_state(base, ckpt.tensors, "base")
    return base, schedule


def load_adapter_set(ckpt: Checkpoint) -> AdapterSet:
    if ckpt.kind != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, got kind={ckpt.kind!r}")
    meta = ckpt.metadata["adapter"]
    aset = AdapterSet(
        sites={k: int(v) for k, v in meta["sites"].items()},
        rank=int(meta["rank"]),
        aligned=bool(meta["aligned"]),
        y_lora_enabled=bool(meta["y_lora_enabled"]),
        fingerprint=meta["fingerprint"],
        scale=float(meta.get("scale", 1.0)),
    )
    _load_state(aset, ckpt.tensors, "adapter")
    return aset


def load_joint_model(base_path, adapter_path=None) -> tuple[JointDenoiser, NoiseSchedule]:
    """Base checkpoint (+ optional adapter checkpoint) -> ready JointDenoiser."""
    from .adapters import attach

    base, schedule = load_base(load_checkpoint(base_path))
    model = JointDenoiser(base)
    if adapter_path is not None:
        attach(model, load_adapter_set(load_checkpoint(adapter_path)))
    return model, schedule
