"""Checkpoint files.

Layout::

    b"CVCKPT\\x00\\x01"            magic + format version
    uint64 LE                     manifest length in bytes
    manifest                      UTF-8 JSON, sorted keys
    payload                       float32 LE arrays, back to back

The manifest carries the model config, each parameter's name, shape,
partition tag and payload offset, optional optimizer velocities and run
state, plus the payload length and SHA-256 so truncation or bit rot is
caught before anything is applied.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from covervid.data import SamplerState
from covervid.model import ModelConfig, ModelParams, partition_of
from covervid.optim import OptimizerState
from covervid.tensor import Tensor

MAGIC = b"CVCKPT\x00"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _entries(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes], int]:
    meta, chunks = [], []
    for name in sorted(arrays):
        a = arrays[name]
        if a.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32, got {a.dtype}")
        buf = np.ascontiguousarray(a, dtype=_LE_F32).tobytes()
        meta.append({"name": name, "shape": list(a.shape), "partition": partition_of(name),
                     "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    return meta, chunks, offset


def checkpoint_bytes(params: ModelParams, cfg: ModelConfig, run_state=None, extra: dict | None = None) -> bytes:
    arrays = {k: p.values for k, p in params.items()}
    pmeta, chunks, off = _entries(arrays, 0)
    manifest = {"format": "covervid-checkpoint", "version": VERSION, "model": cfg.to_dict(),
                "params": pmeta, "velocity": None, "run_state": None, "extra": extra or {}}
    if run_state is not None:
        vmeta, vchunks, off = _entries(run_state.optimizer.velocity, off)
        manifest["velocity"] = vmeta
        manifest["run_state"] = run_state.to_dict()
        chunks += vchunks
    payload = b"".join(chunks)
    manifest["payload_bytes"] = len(payload)
    manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, run_state=None, extra: dict | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    data = checkpoint_bytes(params, cfg, run_state, extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def _read_arrays(meta: list[dict], payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for m in meta:
        shape = tuple(m["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if m["nbytes"] != 4 * n or m["offset"] + m["nbytes"] > len(payload):
            raise CheckpointError(f"corrupt checkpoint: bad extent for {m['name']}")
        a = np.frombuffer(payload, dtype=_LE_F32, count=n, offset=m["offset"]).reshape(shape)
        out[m["name"]] = a.astype(np.float32)
    return out


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Return ``(params, model_config, run_state_or_None, extra)``.

    Nothing is returned unless the whole file validates.
    """
    raw = Path(path).read_bytes()
    hdr = len(MAGIC) + 1 + 8
    if len(raw) < hdr or not raw.startswith(MAGIC):
        raise CheckpointError(f"corrupt checkpoint {path}: bad header")
    version = raw[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    (mlen,) = struct.unpack("<Q", raw[len(MAGIC) + 1:hdr])
    if hdr + mlen > len(raw):
        raise CheckpointError(f"corrupt checkpoint {path}: truncated manifest")
    try:
        manifest = json.loads(raw[hdr:hdr + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable manifest") from exc
    if manifest.get("version") != VERSION or manifest.get("format") != "covervid-checkpoint":
        raise CheckpointError(f"checkpoint manifest version mismatch in {path}")
    payload = raw[hdr + mlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"corrupt checkpoint {path}: payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"corrupt checkpoint {path}: payload checksum mismatch")

    cfg = ModelConfig.from_dict(manifest["model"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        raise CheckpointError("checkpoint model config does not match the requested config")
    if cfg.dtype != "float32":
        raise CheckpointError(f"checkpoint declares dtype {cfg.dtype}; only float32 is stored")
    arrays = _read_arrays(manifest["params"], payload)
    from covervid.model import init_params

    template = init_params(cfg)
    if set(template) != set(arrays):
        raise CheckpointError("checkpoint parameter names do not match the model config")
    for k, a in arrays.items():
        if template[k].shape != a.shape:
            raise CheckpointError(f"shape mismatch for {k}: file {a.shape}, config {template[k].shape}")
    params = ModelParams({k: Tensor(arrays[k], name=k) for k in sorted(arrays)})

    run_state = None
    if manifest.get("run_state") is not None:
        from covervid.train import RunState

        rs = manifest["run_state"]
        vel = _read_arrays(manifest["velocity"], payload)
        opt = OptimizerState(momentum=rs["momentum"], lr=rs["lr"], velocity=vel)
        run_state = RunState(step=int(rs["step"]), optimizer=opt,
                             sampler=SamplerState.from_state(rs["sampler"]),
                             epoch_losses=list(rs["epoch_losses"]),
                             running_loss=float(rs["running_loss"]),
                             running_steps=int(rs["running_steps"]))
    return params, cfg, run_state, manifest.get("extra", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
