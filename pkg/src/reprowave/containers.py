"""Binary containers for simulation snapshots and model checkpoints.

Frame container layout (little endian):

    magic    8 bytes  b"RWAVFLD1"
    version  u32
    n        u32      grid points per side
    frames   u32      number of stored frames
    prec     u8       1 = single, 2 = double
    echo     u32 + utf-8 bytes, "key value" lines echoing the SimConfig
    steps    frames x u32, simulation timestep of each frame
    data     frames x n x n scalars, row major, chronological

Checkpoint container layout (little endian):

    magic    8 bytes  b"RWAVCKP1"
    version  u32
    prec     u8
    epoch    u32
    run_id   u32 + utf-8
    entropy  u32 + utf-8 (hex root of the shuffled-order stream, may be empty)
    arch     u32 + utf-8 (architecture spec hash)
    scalars  u32 + utf-8 (JSON: optimizer step/lr/scheduler state, losses)
    count    u32
    arrays   count x [name u32+utf-8, dtype u8, ndim u8, dims u32 each, raw data]

Both containers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .precision import dtype_of, precision_of

FRAME_MAGIC = b"RWAVFLD1"
CKPT_MAGIC = b"RWAVCKP1"
FORMAT_VERSION = 1

_PREC_CODE = {"single": 1, "double": 2}
_CODE_PREC = {v: k for k, v in _PREC_CODE.items()}


class ContainerError(ValueError):
    """Malformed or mismatching container file."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError("truncated container")
    return data


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def echo_text(echo: Mapping[str, object]) -> str:
    return "".join(f"{k} {v}\n" for k, v in echo.items())


def parse_echo(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            out[key] = value
    return out


def write_frame_container(path, frames: np.ndarray, timesteps, echo: Mapping[str, object]) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[1] != frames.shape[2]:
        raise ContainerError(f"frames must be (count, n, n), got {frames.shape}")
    timesteps = np.asarray(timesteps, dtype=np.uint32)
    if timesteps.shape != (frames.shape[0],):
        raise ContainerError("one timestep per frame required")
    prec = precision_of(frames)
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, frames.shape[1], frames.shape[0]))
        fh.write(struct.pack("<B", _PREC_CODE[prec]))
        fh.write(_pack_str(echo_text(echo)))
        fh.write(timesteps.tobytes())
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frame_container(path) -> tuple[np.ndarray, np.ndarray, dict[str, str]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != FRAME_MAGIC:
            raise ContainerError(f"{path}: not a frame container")
        version, n, count = struct.unpack("<III", _read_exact(fh, 12))
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        (code,) = struct.unpack("<B", _read_exact(fh, 1))
        echo = parse_echo(_unpack_str(fh))
        steps = np.frombuffer(_read_exact(fh, 4 * count), dtype="<u4").copy()
        dt = dtype_of(_CODE_PREC[code])
        raw = _read_exact(fh, count * n * n * dt.itemsize)
        frames = np.frombuffer(raw, dtype=dt).reshape(count, n, n).copy()
    return frames, steps, echo


_DTYPE_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}


def write_checkpoint(
    path,
    precision: str,
    epoch: int,
    run_id: str,
    entropy_ref: str,
    arch_hash: str,
    scalars: Mapping[str, object],
    arrays: Mapping[str, np.ndarray],
) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<B", _PREC_CODE[precision]))
        fh.write(struct.pack("<I", epoch))
        fh.write(_pack_str(run_id))
        fh.write(_pack_str(entropy_ref))
        fh.write(_pack_str(arch_hash))
        fh.write(_pack_str(json.dumps(dict(scalars), sort_keys=True)))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            fh.write(_pack_str(name))
            fh.write(struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path, convert_to: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; `convert_to` casts float arrays to another precision.

    Without the flag the stored precision is returned untouched.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CKPT_MAGIC:
            raise ContainerError(f"{path}: not a checkpoint container")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        (code,) = struct.unpack("<B", _read_exact(fh, 1))
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = {
            "precision": _CODE_PREC[code],
            "epoch": epoch,
            "run_id": _unpack_str(fh),
            "entropy_ref": _unpack_str(fh),
            "arch_hash": _unpack_str(fh),
        }
        meta["scalars"] = json.loads(_unpack_str(fh))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _unpack_str(fh)
            dcode, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            dt = _CODE_DTYPE[dcode]
            raw = _read_exact(fh, int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if convert_to is not None and convert_to != meta["precision"]:
        target = dtype_of(convert_to)
        arrays = {
            name: arr.astype(target) if arr.dtype.kind == "f" else arr
            for name, arr in arrays.items()
        }
        meta["precision"] = convert_to
    return meta, arrays
