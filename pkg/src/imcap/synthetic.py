"""Desk-scale synthetic captioning data.

Each image gets a latent tuple (subject, color, action, place). Feature rows
are sums of per-attribute code vectors plus Gaussian noise, so a linear
read-out recovers the latent; the five captions are template renderings of
the same latent. With two streams, stream ``a`` carries (subject, action) and
stream ``b`` carries (color, place): each stream alone determines only half
of the caption.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import write_captions, write_features

SLOTS = ("subject", "color", "action", "place")
WORDS = {
    "subject": ["dog", "cat", "man", "woman", "boy", "girl", "horse", "bird",
                "cow", "child", "sheep", "player", "biker", "surfer", "skier", "chef"],
    "color": ["red", "blue", "green", "yellow", "black", "white", "brown", "orange",
              "pink", "purple", "gray", "golden", "silver", "striped", "spotted", "pale"],
    "action": ["running", "jumping", "sitting", "standing", "eating", "sleeping", "walking", "playing",
               "swimming", "climbing", "reading", "riding", "dancing", "resting", "waiting", "looking"],
    "place": ["park", "beach", "street", "field", "kitchen", "forest", "garden", "river",
              "snow", "road", "yard", "market", "bridge", "city", "lake", "room"],
}
TEMPLATES = (
    "a {color} {subject} is {action} in the {place} .",
    "the {color} {subject} is {action} in a {place} .",
    "a {subject} that is {color} is {action} in the {place} .",
    "in the {place} , a {color} {subject} is {action} .",
    "a {color} {subject} {action} near the {place} .",
)
STREAM_SLOTS = {1: (SLOTS,), 2: (("subject", "action"), ("color", "place"))}
STREAM_FILES = ("features_a.icfr", "features_b.icfr")
DETECTION_FILE = "features_det.icfr"


def slot_words(vocab_size: int) -> dict[str, list[str]]:
    """Attribute words per slot: ``max(2, vocab_size // 4)`` values each."""
    k = max(2, vocab_size // len(SLOTS))
    out = {}
    for slot in SLOTS:
        base = WORDS[slot]
        out[slot] = base[:k] + [f"{slot}{i}" for i in range(len(base), k)]
    return out


@dataclass
class SyntheticData:
    captions: dict[str, list[str]]
    streams: list[dict[str, np.ndarray]]
    latents: dict[str, tuple[int, ...]]
    detection: dict[str, np.ndarray] | None = None


def gen_synthetic(num_images: int, vocab_size: int = 24, feature_dim: int = 32, streams: int = 1,
                  seed: int = 0, rows: int = 1, noise: float = 0.1,
                  detection_classes: int = 0) -> SyntheticData:
    """Generate a reproducible captioning corpus; a pure function of its arguments."""
    if min(num_images, vocab_size, feature_dim, rows) < 1:
        raise ValueError("num_images, vocab_size, feature_dim and rows must be >= 1")
    if streams not in STREAM_SLOTS:
        raise ValueError("streams must be 1 or 2")
    rng = np.random.default_rng(seed)
    words = slot_words(vocab_size)
    k = len(words["subject"])
    codes = [
        {slot: rng.standard_normal((k, feature_dim)) for slot in carried}
        for carried in STREAM_SLOTS[streams]
    ]
    ids = [f"img{i:05d}" for i in range(num_images)]
    latents, captions = {}, {}
    feats = [dict() for _ in range(streams)]
    detection = {} if detection_classes > 0 else None
    for image_id in ids:
        latent = tuple(int(v) for v in rng.integers(0, k, size=len(SLOTS)))
        latents[image_id] = latent
        fill = {slot: words[slot][v] for slot, v in zip(SLOTS, latent)}
        captions[image_id] = [t.format(**fill) for t in TEMPLATES]
        for s, carried in enumerate(STREAM_SLOTS[streams]):
            center = sum(codes[s][slot][latent[SLOTS.index(slot)]] for slot in carried)
            mat = center[None, :] + noise * rng.standard_normal((rows, feature_dim))
            feats[s][image_id] = mat.astype(np.float32)
        if detection is not None:
            detection[image_id] = _boxes(latent, detection_classes, rng)
    return SyntheticData(captions, feats, latents, detection)


def _boxes(latent, num_classes: int, rng) -> np.ndarray:
    """Two boxes: one classed by subject, one by place."""
    out = np.zeros((2, 4 + num_classes), dtype=np.float32)
    for row, slot in enumerate(("subject", "place")):
        w, h = rng.uniform(0.1, 0.5, size=2)
        x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
        out[row, :4] = (x, y, w, h)
        out[row, 4 + latent[SLOTS.index(slot)] % num_classes] = 1.0
    return out


def write_synthetic(out_dir: str | Path, data: SyntheticData) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"captions": str(out / "captions.json")}
    write_captions(paths["captions"], data.captions)
    for s, stream in enumerate(data.streams):
        path = out / STREAM_FILES[s]
        write_features(path, stream)
        paths[f"features_{'ab'[s]}"] = str(path)
    if data.detection is not None:
        write_features(out / DETECTION_FILE, data.detection)
        paths["features_det"] = str(out / DETECTION_FILE)
    return paths
