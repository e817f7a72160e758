"""Binary checkpoint files. Byte layout is in ``docs/checkpoint_format.md``."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"PRTCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, payload):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(meta, tensors):
    """Serialize a JSON-able ``meta`` dict and an ordered name -> array mapping."""
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(payload):
    if len(payload) < len(MAGIC) + 12:
        raise CheckpointError("truncated checkpoint")
    if payload[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    version, n_text = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        meta = json.loads(take(n_text).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    return meta, tensors


def save_checkpoint(path, model, optimizer=None, extra=None):
    """Write model parameters, optional optimizer moments and a config echo."""
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        meta["optimizer"] = optimizer.hyperparameters()
        for k, (m, v) in optimizer.moments().items():
            tensors[f"adam_m/{k}"] = m
            tensors[f"adam_v/{k}"] = v
    atomic_write_bytes(path, encode(meta, tensors))


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(payload)


def params_of(tensors):
    return {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}


def load_checkpoint(path, expected_config=None, seed=0):
    """Rebuild the model stored at ``path``.

    Returns ``(model, meta, tensors)``; ``tensors`` still holds optimizer moments.
    When ``expected_config`` is given, the stored config echo must equal it.
    """
    from .model import ModelConfig, PRTransformer

    meta, tensors = read_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError("checkpoint header has no model config")
    config = ModelConfig.from_dict(meta["model"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if meta["model"].get(k) != v)
        raise CheckpointError(f"checkpoint config differs from expected in: {', '.join(diff)}")
    model = PRTransformer(config, seed=seed)
    try:
        model.load_state_dict(params_of(tensors))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    return model, meta, tensors
