"""Binary checkpoint files.

Layout (integers little-endian u32)::

    b"ICKP" | version | config length | config JSON (UTF-8)
    per parameter, until end of file:
        name length | name (UTF-8) | rank | dims x rank | float32 LE payload

The config JSON carries the architecture, the vocabulary tokens and any
run metadata (e.g. the split seed) needed to reuse the model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ArchitectureConfig, Captioner, param_manifest
from .text import Vocabulary

CHECKPOINT_MAGIC = b"ICKP"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(cfg: ArchitectureConfig, params: dict[str, Tensor], vocab: Vocabulary | None = None,
                      meta: dict | None = None) -> bytes:
    doc = {"architecture": cfg.to_json(), "meta": meta or {}}
    if vocab is not None:
        doc["vocabulary"] = vocab.to_json()
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(blob)), blob]
    for name, _, _ in param_manifest(cfg):
        arr = np.asarray(params[name].data)
        key = name.encode("utf-8")
        chunks += [_U32.pack(len(key)), key, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(d) for d in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> tuple[ArchitectureConfig, dict[str, Tensor], Vocabulary | None, dict]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint truncated")
        out = buf[pos : pos + n]
        pos += n
        return out

    def u32():
        return _U32.unpack(take(4))[0]

    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4
    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    doc = json.loads(take(u32()).decode("utf-8"))
    cfg = ArchitectureConfig.from_json(doc["architecture"])
    dtype = cfg.np_dtype
    params = {}
    while pos < len(buf):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(dtype)
        if name in params:
            raise CheckpointError(f"duplicate parameter {name}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    vocab = Vocabulary.from_json(doc["vocabulary"]) if "vocabulary" in doc else None
    return cfg, params, vocab, doc.get("meta", {})


def save_checkpoint(path: str | Path, model: Captioner, vocab: Vocabulary | None = None,
                    meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model.cfg, model.params, vocab, meta))


def load_checkpoint(path: str | Path) -> tuple[Captioner, Vocabulary | None, dict]:
    cfg, params, vocab, meta = decode_checkpoint(Path(path).read_bytes())
    return Captioner(cfg, params), vocab, meta
