"""Binary serialization: tensor records, checkpoints, exact round trips.

A tensor record is a shape header followed by the flat little-endian
float64 payload.  A checkpoint is a key-sorted JSON header (config, step,
bookkeeping) followed by named records for parameters, optimizer moments
and the prototype bank; saving the result of a load reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .pipeline import PipelineConfig, PipelineState

_MAGIC = b"MVCK"
_VERSION = 1


def write_array(fh, arr: np.ndarray) -> None:
    """Shape header (u32 ndim, u64 dims) then the float64 payload, all LE."""
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def read_array(fh) -> np.ndarray:
    raw = fh.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated tensor record header")
    (ndim,) = struct.unpack("<I", raw)
    if ndim > 8:
        raise CheckpointError(f"implausible tensor rank {ndim}")
    dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise CheckpointError("truncated tensor record payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)


def _checkpoint_records(state: PipelineState):
    records = [(name, state.params[name].data) for name in sorted(state.params)]
    for name in sorted(state.params):
        records.append((f"opt.m.{name}", state.optimizer.m[name]))
        records.append((f"opt.v.{name}", state.optimizer.v[name]))
    records.append(("class_weights", state.class_weights))
    if state.bank is not None:
        records.append(("bank.protos", state.bank.protos))
        records.append(("bank.initialized", state.bank.initialized.astype(np.float64)))
    return records


def save_checkpoint(path, state: PipelineState) -> None:
    records = _checkpoint_records(state)
    header = json.dumps(
        {
            "config": state.config.to_dict(),
            "config_hash": state.config.config_hash(),
            "step": state.step,
            "opt_t": state.optimizer.t,
            "records": [name for name, _ in records],
            "version": _VERSION,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in records:
            write_array(fh, arr)


def load_checkpoint(path) -> PipelineState:
    """Rebuild a pipeline state; the result trains on bitwise as if never saved."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        config = PipelineConfig.from_dict(header["config"])
        if config.config_hash() != header["config_hash"]:
            raise CheckpointError("checkpoint config does not match its recorded hash")
        state = PipelineState(config)
        arrays = {}
        for name in header["records"]:
            arrays[name] = read_array(fh)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last record")

    expected = [name for name, _ in _checkpoint_records(state)]
    if expected != header["records"]:
        raise CheckpointError("checkpoint records do not match this configuration")
    for name, p in state.params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"record {name} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr
        state.optimizer.m[name] = arrays[f"opt.m.{name}"]
        state.optimizer.v[name] = arrays[f"opt.v.{name}"]
    state.class_weights = arrays["class_weights"]
    if state.bank is not None:
        state.bank.protos = arrays["bank.protos"]
        state.bank.initialized = arrays["bank.initialized"].astype(bool)
    state.step = int(header["step"])
    state.optimizer.t = int(header["opt_t"])
    return state
