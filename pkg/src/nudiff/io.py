"""Binary tensor dumps and MLP checkpoints.

Tensor file layout (one array per file)::

    b"NUDT"                      4-byte magic
    uint32 little-endian         length L of the JSON header
    L bytes UTF-8 JSON           {"shape": [...], "dtype": "<f8", "layout": "C", ...}
    raw little-endian payload    row-major

Checkpoint layout::

    b"NUDCKPT1"                  8-byte magic
    uint32 little-endian         length L of the JSON header
    L bytes UTF-8 JSON           architecture, parameter shapes, "has_ema"
    float64 LE, row-major        W1, b1, W2, b2, ... (raw weights)
    float64 LE, row-major        same block for the EMA weights (if has_ema)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .score_models import Mlp

TENSOR_MAGIC = b"NUDT"
CHECKPOINT_MAGIC = b"NUDCKPT1"
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def _write_framed(path, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def _read_framed(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[: len(magic)] != magic:
        raise ContractError(f"{path}: bad magic, not a {magic.decode()} file")
    off = len(magic)
    if len(data) < off + 4:
        raise ContractError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", data[off:off + 4])
    off += 4
    try:
        header = json.loads(data[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{path}: corrupt JSON header") from exc
    return header, data[off + n:]


def save_tensor(path, array, meta: dict | None = None) -> None:
    """Write ``array`` as little-endian row-major data behind a JSON header."""
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = a.astype("<f8")
    elif a.dtype.kind in "iu":
        a = a.astype("<i8")
    else:
        raise ContractError(f"unsupported dtype {a.dtype}")
    header = {"shape": list(a.shape), "dtype": a.dtype.str, "layout": "C"}
    if meta:
        header["meta"] = meta
    _write_framed(path, TENSOR_MAGIC, header, np.ascontiguousarray(a).tobytes())


def load_tensor(path, with_header: bool = False):
    header, payload = _read_framed(path, TENSOR_MAGIC)
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None or header.get("layout") != "C":
        raise ContractError(f"{path}: unsupported dtype/layout in header")
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != count * dtype.itemsize:
        raise ContractError(f"{path}: payload size does not match shape {shape}")
    a = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return (a, header) if with_header else a


def _arch(model: Mlp) -> dict:
    return {"input_dim": model.input_dim, "hidden": list(model.hidden),
            "output_dim": model.output_dim, "cond_dim": model.cond_dim,
            "activation": model.activation, "time_dim": model.time_dim}


def _pack(params) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)


def save_checkpoint(path, model: Mlp, ema: Mlp | None = None, meta: dict | None = None) -> None:
    if ema is not None and _arch(ema) != _arch(model):
        raise ContractError("EMA weights belong to a different architecture")
    header = {"format": 1, "arch": _arch(model), "shapes": [list(p.shape) for p in model.params],
              "has_ema": ema is not None}
    if meta:
        header["meta"] = meta
    payload = _pack(model.params) + (_pack(ema.params) if ema is not None else b"")
    _write_framed(path, CHECKPOINT_MAGIC, header, payload)


def load_checkpoint(path):
    """Return ``(model, ema_or_None, header)``."""
    header, payload = _read_framed(path, CHECKPOINT_MAGIC)
    try:
        arch = header["arch"]
        shapes = [tuple(s) for s in header["shapes"]]
    except (KeyError, TypeError) as exc:
        raise ContractError(f"{path}: header lacks architecture fields") from exc
    sizes = [int(np.prod(s)) for s in shapes]
    n = sum(sizes)
    blocks = 2 if header.get("has_ema") else 1
    if len(payload) != 8 * n * blocks:
        raise ContractError(f"{path}: expected {blocks} weight block(s) of {n} floats")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)

    def unpack(block):
        out, off = [], block * n
        for shape, size in zip(shapes, sizes):
            out.append(flat[off:off + size].reshape(shape).copy())
            off += size
        return out

    def build(params):
        return Mlp(arch["input_dim"], arch["hidden"], output_dim=arch["output_dim"],
                   cond_dim=arch["cond_dim"], activation=arch["activation"],
                   time_dim=arch["time_dim"], params=params)

    model = build(unpack(0))
    ema = build(unpack(1)) if blocks == 2 else None
    return model, ema, header
