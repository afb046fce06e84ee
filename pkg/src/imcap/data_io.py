"""Feature files, caption datasets and JSON result serialization.

Feature file layout (all integers little-endian u32)::

    b"ICFR" | version | entry count
    per entry: id length | id (UTF-8) | rows | cols | rows*cols float32 LE, row-major
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FEATURE_MAGIC = b"ICFR"
FEATURE_VERSION = 1
CAPTIONS_PER_IMAGE = 5

_U32 = struct.Struct("<I")


class FeatureFileError(ValueError):
    """Malformed feature file."""


class BadMagicError(FeatureFileError):
    pass


class UnsupportedVersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DuplicateIdError(FeatureFileError):
    pass


class DatasetError(ValueError):
    def __init__(self, message: str, ids: Iterable[str] = ()):
        self.ids = sorted(ids)
        if self.ids:
            message = f"{message}: {', '.join(self.ids)}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Feature files


def encode_features(entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    seen = set()
    chunks = [FEATURE_MAGIC, _U32.pack(FEATURE_VERSION), _U32.pack(len(items))]
    for image_id, mat in items:
        if image_id in seen:
            raise DuplicateIdError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        arr = np.asarray(mat)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise FeatureFileError(f"features for {image_id!r} must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FeatureFileError(f"features for {image_id!r} contain non-finite values")
        key = image_id.encode("utf-8")
        chunks += [_U32.pack(len(key)), key, _U32.pack(arr.shape[0]), _U32.pack(arr.shape[1])]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_features(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"feature file truncated at byte {len(buf)} (needed {pos + n})")
        out = buf[pos : pos + n]
        pos += n
        return out

    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise BadMagicError("not a feature file (bad magic)")
    pos = 4
    version = _U32.unpack(take(4))[0]
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"unsupported feature file version {version}")
    count = _U32.unpack(take(4))[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        key_len = _U32.unpack(take(4))[0]
        image_id = take(key_len).decode("utf-8")
        rows, cols = _U32.unpack(take(4))[0], _U32.unpack(take(4))[0]
        payload = take(4 * rows * cols)
        if image_id in out:
            raise DuplicateIdError(f"duplicate image id {image_id!r}")
        out[image_id] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if pos != len(buf):
        raise FeatureFileError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return out


def write_features(path: str | Path, entries) -> None:
    Path(path).write_bytes(encode_features(entries))


def read_features(path: str | Path) -> dict[str, np.ndarray]:
    return decode_features(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Caption datasets


@dataclass
class CaptionDataset:
    captions: dict[str, list[str]]
    streams: list[dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def image_ids(self) -> list[str]:
        return sorted(self.captions)

    @property
    def num_captions(self) -> int:
        return sum(len(c) for c in self.captions.values())

    def features(self, image_id: str):
        """Per-stream feature matrices for one image (a tuple when there are two streams)."""
        mats = tuple(s[image_id] for s in self.streams)
        return mats[0] if len(mats) == 1 else mats

    def subset(self, ids: Iterable[str]) -> "CaptionDataset":
        ids = list(ids)
        return CaptionDataset(
            captions={i: self.captions[i] for i in ids},
            streams=[{i: s[i] for i in ids} for s in self.streams],
        )


def read_captions(path: str | Path) -> dict[str, list[str]]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict) or not isinstance(obj.get("images"), dict):
        raise DatasetError(f"{path}: expected an object with an 'images' map")
    return {str(k): list(v) for k, v in obj["images"].items()}


def write_captions(path: str | Path, captions: Mapping[str, list[str]]) -> None:
    text = json.dumps({"images": {k: list(v) for k, v in captions.items()}},
                      ensure_ascii=False, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def validate_dataset(captions: Mapping[str, list[str]], streams: list[Mapping[str, np.ndarray]],
                     permissive: bool = False) -> None:
    if permissive:
        bad = [i for i, c in captions.items() if not 1 <= len(c) <= CAPTIONS_PER_IMAGE]
        rule = f"between 1 and {CAPTIONS_PER_IMAGE} captions required"
    else:
        bad = [i for i, c in captions.items() if len(c) != CAPTIONS_PER_IMAGE]
        rule = f"exactly {CAPTIONS_PER_IMAGE} captions required"
    if bad:
        raise DatasetError(rule, bad)
    bad = [i for i, c in captions.items() if not all(isinstance(s, str) for s in c)]
    if bad:
        raise DatasetError("captions must be strings", bad)
    for k, stream in enumerate(streams):
        missing = [i for i in captions if i not in stream]
        if missing:
            raise DatasetError(f"missing features in stream {k}", missing)


def load_dataset(captions_path: str | Path, feature_paths: Iterable[str | Path] = (),
                 permissive: bool = False) -> CaptionDataset:
    """Load and cross-check captions against feature files; all-or-nothing."""
    captions = read_captions(captions_path)
    streams = [read_features(p) for p in feature_paths]
    validate_dataset(captions, streams, permissive)
    return CaptionDataset(captions=captions, streams=[{i: s[i] for i in captions} for s in streams])


# ---------------------------------------------------------------------------
# JSON serialization with stable ordering and 17 significant digits


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    text = format(x, ".17g")
    if "." not in text and "e" not in text and "n" not in text:
        text += ".0"
    return text


def dumps_json(obj, indent: int | None = None, _level: int = 0) -> str:
    """JSON text with sorted keys and every real written with 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if hasattr(obj, "to_json"):
        return dumps_json(obj.to_json(), indent, _level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, Mapping):
        items = [(str(k), v) for k, v in obj.items()]
        items.sort(key=lambda kv: kv[0])
        parts = [json.dumps(k, ensure_ascii=False) + ": " + dumps_json(v, indent, _level + 1) for k, v in items]
        return _wrap("{", "}", parts, indent, _level)
    if isinstance(obj, (list, tuple)):
        return _wrap("[", "]", [dumps_json(v, indent, _level + 1) for v in obj], indent, _level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _wrap(open_: str, close: str, parts: list[str], indent: int | None, level: int) -> str:
    if not parts:
        return open_ + close
    if indent is None:
        return open_ + ", ".join(parts) + close
    pad = " " * (indent * (level + 1))
    return open_ + "\n" + ",\n".join(pad + p for p in parts) + "\n" + " " * (indent * level) + close


def write_report(path: str | Path, obj, indent: int | None = 1) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_json(obj, indent) + "\n", encoding="utf-8")


def append_jsonl(path: str | Path, record) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(dumps_json(record) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_jsonl(path: str | Path) -> list:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
