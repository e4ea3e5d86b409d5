"""Single-file checkpoints: a JSON manifest followed by a raw float32 payload.

Layout::

    b"SPMCKPT1" | uint64 little-endian manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every tensor as (name, shape, dtype, offset, frozen) in
payload order, plus the run configuration needed to rebuild the model. The
payload is the concatenation of each tensor as little-endian float32.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, run_config_from_dict, run_config_to_dict
from .model import SPMTrack

log = logging.getLogger(__name__)

MAGIC = b"SPMCKPT1"
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _manifest(model: SPMTrack, run: RunConfig | None) -> tuple[dict, list[np.ndarray]]:
    entries, arrays = [], []
    offset = 0
    for name, t in model.named_tensors().items():
        arr = np.ascontiguousarray(t.data, dtype=_F32)
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": "f32",
            "offset": offset,
            "frozen": not t.requires_grad,
        })
        arrays.append(arr)
        offset += arr.nbytes
    run = run if run is not None else RunConfig(model=model.cfg, variant=model.variant)
    manifest = {
        "format": 1,
        "run": run_config_to_dict(run),
        "variant": model.variant,
        "payload_bytes": offset,
        "tensors": entries,
    }
    return manifest, arrays


def to_bytes(model: SPMTrack, run: RunConfig | None = None) -> bytes:
    if model.cfg.dtype != "f32":
        log.warning("checkpoint payload is float32; %s values are rounded", model.cfg.dtype)
    manifest, arrays = _manifest(model, run)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, _LEN.pack(len(head)), head, *(a.tobytes() for a in arrays)])


def save(path: str | Path, model: SPMTrack, run: RunConfig | None = None) -> None:
    """Write atomically: a partially written file never replaces a good one."""
    path = Path(path)
    data = to_bytes(model, run)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_manifest(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < len(MAGIC) + _LEN.size or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + n > len(data):
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = memoryview(data)[start + n:]
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) * 4 for e in manifest["tensors"])
    if len(payload) != expected or manifest.get("payload_bytes") != expected:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest describes {expected}")
    return manifest, payload


def from_bytes(data: bytes) -> tuple[SPMTrack, RunConfig]:
    manifest, payload = read_manifest(data)
    try:
        run = run_config_from_dict(manifest["run"], use_env=False)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad run config in manifest: {exc}") from exc
    model = SPMTrack(run.model, manifest["variant"])
    named = model.named_tensors()
    if set(named) != {e["name"] for e in manifest["tensors"]}:
        missing = sorted(set(named) ^ {e["name"] for e in manifest["tensors"]})
        raise CheckpointError(f"tensor names differ from the model layout: {missing[:5]}")
    for e in manifest["tensors"]:
        t = named[e["name"]]
        if tuple(e["shape"]) != t.shape:
            raise CheckpointError(f"{e['name']}: shape {e['shape']} != model {t.shape}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_F32, count=count, offset=e["offset"]).reshape(e["shape"])
        t.data = arr.astype(t.dtype)
        t.requires_grad = not e["frozen"]
        t.grad = None
    return model, run


def load(path: str | Path) -> tuple[SPMTrack, RunConfig]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return from_bytes(data)
