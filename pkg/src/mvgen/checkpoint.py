"""Binary checkpoint container for the denoiser.

Layout: magic "MRGC", little-endian u32 version (1), u32 header length,
UTF-8 JSON header, then raw little-endian float32 parameter data.  The
header carries the architecture config, the noise schedule's beta vector
(alpha_bar is recomputed on load, which round-trips bit-exactly since JSON
floats preserve the doubles), the training step, and a parameter directory
of name/shape/byte-offset entries in data order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .schedule import NoiseSchedule
from .tensor import Tensor
from .unet import DenoiserCheckpoint, UNetConfig

MAGIC = b"MRGC"
VERSION = 1
_PREFIX = struct.Struct("<II")  # version, header length


class CheckpointError(ValueError):
    pass


def _schedule_to_dict(schedule: NoiseSchedule) -> dict:
    return {"T": schedule.T, "beta": [float(b) for b in schedule.beta]}


def _schedule_from_dict(d: dict) -> NoiseSchedule:
    beta = np.asarray(d["beta"], dtype=np.float64)
    if len(beta) != int(d["T"]):
        raise CheckpointError(f"schedule length {len(beta)} != T {d['T']}")
    sched = NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    sched.validate()
    return sched


def save_checkpoint(ckpt: DenoiserCheckpoint, path: str | Path) -> None:
    ckpt.validate()
    directory = []
    blobs = []
    offset = 0
    for name, tensor in ckpt.params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": ckpt.config.to_dict(),
        "schedule": _schedule_to_dict(ckpt.schedule),
        "step": ckpt.step,
        "params": directory,
    }, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> DenoiserCheckpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 4 + _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing header prefix")
    version, header_len = _PREFIX.unpack_from(blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 4 + _PREFIX.size
    if len(blob) < start + header_len:
        raise CheckpointError("truncated checkpoint: incomplete header")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc

    config = UNetConfig.from_dict(header["config"])
    schedule = _schedule_from_dict(header["schedule"])
    data = blob[start + header_len:]
    params: dict[str, Tensor] = {}
    expected = 0
    for entry in header["params"]:
        name = entry["name"]
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        if offset != expected:
            raise CheckpointError(f"parameter {name!r} offset {offset} != {expected}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated checkpoint: parameter {name!r} data missing")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.copy(), requires_grad=True)
        expected = end
    if expected != len(data):
        raise CheckpointError(f"{len(data) - expected} trailing bytes after parameters")
    try:
        return DenoiserCheckpoint(config, schedule, params, step=int(header["step"]))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
