"""Binary checkpoint format.

Layout, all integers unsigned 32-bit little-endian::

    b"SATL" | version | 32-byte SHA-256 of the model config | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE payload
    CRC-32 of every preceding byte

Tensor names are namespaced: ``param/...`` for learnable weights,
``buffer/...`` for batch-norm running statistics and ``optim/...`` for
optimizer accumulators. Values are stored as float32 and widened to float64
on load.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from typing import Optional

import numpy as np

from .backbone import Model, ModelConfig, build_model
from .imageio import DataError
from .train import AdaDeltaState, RMSpropState

MAGIC = b"SATL"
VERSION = 1


class ChecksumError(DataError):
    """Checkpoint bytes do not match their CRC-32."""


def config_digest(cfg: ModelConfig) -> bytes:
    from .runconfig import serialize_model

    return hashlib.sha256(serialize_model(cfg).encode("utf-8")).digest()


def _optimizer_tensors(opt) -> dict:
    out = {}
    if isinstance(opt, RMSpropState):
        slots, kind = {"s": opt.s, "m": opt.m}, "rmsprop"
    elif isinstance(opt, AdaDeltaState):
        slots, kind = {"eg": opt.eg, "ex": opt.ex}, "adadelta"
    elif opt is None:
        return out
    else:
        raise TypeError(f"unsupported optimizer state {type(opt).__name__}")
    out[f"optim/{kind}/step"] = np.asarray(float(opt.step))
    for slot, d in slots.items():
        for name, arr in d.items():
            out[f"optim/{kind}/{slot}/{name}"] = arr
    return out


def named_tensors(model: Model, optimizer=None) -> dict:
    out = {f"param/{k}": t.data for k, t in model.params.items()}
    out.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    out.update(_optimizer_tensors(optimizer))
    return out


def encode(tensors: dict, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple:
    """Returns ``(digest, {name: float64 array})``; raises on any corruption."""
    if len(blob) < 4 + 4 + 32 + 4 + 4:
        raise DataError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch; refusing to load")
    if body[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    digest = body[8:40]
    (count,) = struct.unpack_from("<I", body, 40)
    pos = 44
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            tensors[name] = arr.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise DataError("trailing bytes in checkpoint")
    return digest, tensors


def save(path, model: Model, optimizer=None) -> bytes:
    blob = encode(named_tensors(model, optimizer), config_digest(model.config))
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load(path, cfg: ModelConfig) -> tuple:
    """Rebuild a model for ``cfg`` from a checkpoint; returns ``(model, optimizer)``."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    digest, tensors = decode(blob)
    if digest != config_digest(cfg):
        raise DataError("checkpoint was written for a different model configuration")
    model = build_model(cfg, 0)
    for k, t in model.params.items():
        arr = tensors.get(f"param/{k}")
        if arr is None or arr.shape != t.shape:
            raise DataError(f"checkpoint lacks parameter {k} with shape {t.shape}")
        t.data[...] = arr
    for k, buf in model.buffers.items():
        arr = tensors.get(f"buffer/{k}")
        if arr is None or arr.shape != buf.shape:
            raise DataError(f"checkpoint lacks buffer {k}")
        buf[...] = arr
    model.eval()
    return model, _restore_optimizer(tensors)


def _restore_optimizer(tensors: dict) -> Optional[object]:
    for kind, cls, slots in (("rmsprop", RMSpropState, ("s", "m")), ("adadelta", AdaDeltaState, ("eg", "ex"))):
        step = tensors.get(f"optim/{kind}/step")
        if step is None:
            continue
        state = cls()
        state.step = int(step)
        for slot in slots:
            prefix = f"optim/{kind}/{slot}/"
            getattr(state, slot).update(
                {k[len(prefix):]: v.copy() for k, v in tensors.items() if k.startswith(prefix)}
            )
        return state
    return None


def param_elements(tensors: dict) -> int:
    return int(sum(v.size for k, v in tensors.items() if k.startswith("param/")))
