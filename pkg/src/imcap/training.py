"""Teacher-forced training, validation and grid search.

A run writes into ``<output_dir>/<name>/``:

* ``epochs.jsonl``  one record per epoch (loss and validation metrics)
* ``timing.jsonl``  wall-clock seconds per epoch, kept apart so that
  ``epochs.jsonl`` is reproducible byte for byte
* ``best.ickp`` / ``final.ickp``  checkpoints, ``vocab.json``, ``manifest.json``
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import save_checkpoint
from .config import GRID_FIELDS, PAPER_GRID, RunConfig, TrainConfig
from .data_io import CaptionDataset, append_jsonl, load_dataset, write_report
from .decoding import beam_search_decode, greedy_decode
from .metrics import MetricReport, evaluate_corpus
from .models import ArchitectureConfig, Captioner
from .text import PAD_ID, Vocabulary, build_vocab, decode, encode, tokenize

log = logging.getLogger(__name__)

MIN_SPLIT_IMAGES = 20


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Data handling


def split_dataset(image_ids: Sequence[str], seed: int) -> tuple[list[str], list[str], list[str]]:
    """Seeded 85/10/5 shuffle split: floor(0.85 n), floor(0.10 n), remainder."""
    ids = sorted(image_ids)
    n = len(ids)
    if n < MIN_SPLIT_IMAGES:
        raise ValueError(f"need at least {MIN_SPLIT_IMAGES} images to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = (85 * n) // 100
    n_val = (10 * n) // 100
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def sample_reference(refs: Sequence[str], rng: np.random.Generator) -> str:
    if not refs:
        raise ValueError("empty reference set")
    return refs[int(rng.integers(len(refs)))]


def run_splits(dataset: CaptionDataset, tc: TrainConfig) -> tuple[list[str], list[str], list[str]]:
    if tc.split == "all":
        ids = dataset.image_ids
        return ids, ids, []
    return split_dataset(dataset.image_ids, tc.seed)


def vocab_for(dataset: CaptionDataset, train_ids: Sequence[str], min_count: int) -> Vocabulary:
    return build_vocab((tokenize(c) for i in train_ids for c in dataset.captions[i]), min_count)


def batch_features(dataset: CaptionDataset, ids: Sequence[str], adapter_kind: str, conditioned: bool = True):
    """Stack per-image features into the shape the adapter expects."""
    def get(stream, i):
        mat = stream[i]
        if not conditioned:
            mat = np.zeros((0, mat.shape[1]), mat.dtype) if adapter_kind == "detection" else np.zeros_like(mat)
        return mat

    def stack(stream):
        mats = [get(stream, i) for i in ids]
        if len({m.shape for m in mats}) != 1:
            raise TrainingError("feature matrices in a batch must share a shape")
        return np.stack(mats)

    if adapter_kind == "detection":
        return [get(dataset.streams[0], i) for i in ids]
    if adapter_kind == "stacked":
        return stack(dataset.streams[0]), stack(dataset.streams[1])
    return stack(dataset.streams[0])


def one_features(dataset: CaptionDataset, image_id: str, adapter_kind: str, conditioned: bool = True):
    feats = batch_features(dataset, [image_id], adapter_kind, conditioned)
    if adapter_kind == "detection":
        return feats[0]
    if adapter_kind == "stacked":
        return feats[0][0], feats[1][0]
    return feats[0]


def pad_sequences(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = s
    return out


# ---------------------------------------------------------------------------
# Optimizers


def check_grads(params: dict[str, ad.Tensor]) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name}")


def sgd_step(params: dict[str, ad.Tensor], lr: float) -> None:
    check_grads(params)
    for p in params.values():
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], lr: float, state: AdamState) -> None:
    """Bias-corrected Adam update; parameters without a gradient see a zero gradient."""
    check_grads(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_grad_norm(params: dict[str, ad.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return total


# ---------------------------------------------------------------------------
# Epochs


@dataclass
class RunRngs:
    shuffle: np.random.Generator
    reference: np.random.Generator
    dropout: np.random.Generator
    init_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "RunRngs":
        ss = np.random.SeedSequence(seed)
        init_ss, shuffle_ss, ref_ss, drop_ss = ss.spawn(4)
        return cls(np.random.default_rng(shuffle_ss), np.random.default_rng(ref_ss),
                   np.random.default_rng(drop_ss), int(init_ss.generate_state(1)[0]))


def train_epoch(model: Captioner, dataset: CaptionDataset, train_ids: Sequence[str], vocab: Vocabulary,
                tc: TrainConfig, rngs: RunRngs, opt_state: AdamState | None = None) -> float:
    """One pass over shuffled batches; returns the token-weighted mean loss."""
    if not train_ids:
        raise TrainingError("empty training set")
    model.training = True
    model.rng = rngs.dropout
    params = model.params
    order = rngs.shuffle.permutation(len(train_ids))
    total_loss, total_tokens = 0.0, 0
    kind = model.cfg.adapter_kind
    for start in range(0, len(order), tc.batch_size):
        ids = [train_ids[k] for k in order[start : start + tc.batch_size]]
        seqs = []
        for i in ids:
            refs = dataset.captions[i]
            ref = refs[0] if tc.reference_sampling == "first" else sample_reference(refs, rngs.reference)
            seqs.append(encode(tokenize(ref), vocab, tc.max_len))
        seqs = pad_sequences(seqs)
        for p in params.values():
            p.grad = None
        enc = model.encode(batch_features(dataset, ids, kind, tc.condition_on_image))
        loss = model.loss(seqs, enc)
        value = float(loss.data)
        if not math.isfinite(value):
            ad.clear_tape()
            raise TrainingError(f"non-finite loss {value} on batch starting at position {start} (images {ids[:4]}...)")
        ad.backward(loss)
        clip_grad_norm(params, tc.grad_clip)
        if tc.optimizer == "adam":
            adam_step(params, tc.learning_rate, opt_state)
        else:
            sgd_step(params, tc.learning_rate)
        n_tokens = int((seqs[:, 1:] != PAD_ID).sum())
        total_loss += value * n_tokens
        total_tokens += n_tokens
    model.training = False
    return total_loss / total_tokens


def generate(model: Captioner, features, method: str = "greedy", max_len: int = 30, beam_width: int = 3) -> list[int]:
    enc = model.encode_one(features)
    if method == "greedy":
        return greedy_decode(model, enc, max_len)
    if method in ("beam", "beam3"):
        return beam_search_decode(model, enc, max_len, beam_width)
    raise ValueError(f"unknown decoding method {method!r}")


def validate(model: Captioner, dataset: CaptionDataset, val_ids: Sequence[str], vocab: Vocabulary,
             tc: TrainConfig, method: str | None = None) -> MetricReport:
    """Decode every validation image and score against all of its references."""
    if not val_ids:
        raise TrainingError("empty validation set")
    method = method or tc.eval_method
    model.training = False
    candidates, references = [], []
    for i in val_ids:
        feats = one_features(dataset, i, model.cfg.adapter_kind, tc.condition_on_image)
        ids = generate(model, feats, method, tc.max_len)
        candidates.append(decode(ids, vocab).split())
        references.append([tokenize(c) for c in dataset.captions[i]])
    return evaluate_corpus(candidates, references, list(val_ids))


# ---------------------------------------------------------------------------
# Runs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_bleu4: float | None = None
    val_meteor: float | None = None
    val_cider: float | None = None
    eval_method: str | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_bleu4": self.val_bleu4,
            "val_meteor": self.val_meteor,
            "val_cider": self.val_cider,
            "eval_method": self.eval_method,
        }


@dataclass
class RunResult:
    config: RunConfig
    records: list[EpochRecord]
    model: Captioner
    vocab: Vocabulary
    best_epoch: int
    run_dir: Path | None

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def architecture_for(rc: RunConfig, dataset: CaptionDataset, vocab: Vocabulary) -> ArchitectureConfig:
    a, t = rc.architecture, rc.training
    dims = [next(iter(s.values())).shape[1] for s in dataset.streams]
    num_classes = a.num_classes
    if a.adapter_kind == "detection" and num_classes == 0:
        num_classes = dims[0] - 4
    return ArchitectureConfig(
        decoder_kind=a.decoder_kind, adapter_kind=a.adapter_kind,
        embed_size=t.embed_size, num_layers=t.num_layers, vocab_size=len(vocab),
        input_dim=dims[0] if a.adapter_kind != "detection" else 0,
        input_dim_b=dims[1] if a.adapter_kind == "stacked" else 0,
        max_len=t.max_len, num_heads=a.num_heads, ffn_size=a.ffn_size, dropout=a.dropout,
        max_boxes=a.max_boxes, num_classes=num_classes if a.adapter_kind == "detection" else 0,
        dtype=t.dtype,
    )


def manifest_for(rc: RunConfig) -> dict:
    return {"config": rc.to_json(), "seed": rc.training.seed, "version": __version__}


def train_run(rc: RunConfig, dataset: CaptionDataset | None = None, write: bool = True) -> RunResult:
    """Train one configuration end to end, validating per the schedule in ``rc.training``."""
    tc = rc.training
    if dataset is None:
        dataset = load_dataset(rc.dataset.captions, rc.dataset.features, rc.dataset.permissive)
    train_ids, val_ids, _ = run_splits(dataset, tc)
    vocab = vocab_for(dataset, train_ids, tc.min_count)
    cfg = architecture_for(rc, dataset, vocab)
    rngs = RunRngs.from_seed(tc.seed)
    model = Captioner(cfg, seed=rngs.init_seed)
    opt_state = AdamState() if tc.optimizer == "adam" else None
    meta = {"name": rc.name, "split": tc.split, "split_seed": tc.seed, "condition_on_image": tc.condition_on_image}

    run_dir = rc.run_dir if write else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        for stale in ("epochs.jsonl", "timing.jsonl"):
            (run_dir / stale).unlink(missing_ok=True)
        vocab.save(run_dir / "vocab.json")
        write_report(run_dir / "manifest.json", manifest_for(rc))

    records: list[EpochRecord] = []
    best_bleu, best_epoch = -1.0, 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(model, dataset, train_ids, vocab, tc, rngs, opt_state)
        rec = EpochRecord(epoch=epoch, train_loss=loss)
        last = epoch == tc.epochs
        if last or epoch % tc.val_every == 0:
            method = tc.eval_method if (last or epoch % tc.beam_every == 0) else "greedy"
            report = validate(model, dataset, val_ids, vocab, tc, method)
            rec.val_bleu4, rec.val_meteor, rec.val_cider, rec.eval_method = (
                report.bleu4, report.meteor, report.cider, method)
            if report.bleu4 > best_bleu:
                best_bleu, best_epoch = report.bleu4, epoch
                if run_dir is not None:
                    save_checkpoint(run_dir / "best.ickp", model, vocab, {**meta, "epoch": epoch})
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        log.info("%s epoch %d loss %.4f bleu4 %s", rc.name, epoch, loss, rec.val_bleu4)
        if run_dir is not None:
            append_jsonl(run_dir / "epochs.jsonl", rec)
            append_jsonl(run_dir / "timing.jsonl", {"epoch": epoch, "wall_time": rec.wall_time})
    if run_dir is not None:
        save_checkpoint(run_dir / "final.ickp", model, vocab, {**meta, "epoch": tc.epochs})
    return RunResult(rc, records, model, vocab, best_epoch, run_dir)


# ---------------------------------------------------------------------------
# Grid search


@dataclass
class GridEntry:
    index: int
    settings: dict
    final_bleu4: float | None
    records: list[EpochRecord]
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "settings": self.settings,
            "final_bleu4": self.final_bleu4,
            "error": self.error,
            "epochs": [r.to_json() for r in self.records],
        }


@dataclass
class GridResult:
    ranked: list[GridEntry]
    best: TrainConfig | None

    def to_json(self) -> dict:
        return {
            "ranked": [e.to_json() for e in self.ranked],
            "best": None if self.best is None else {k: getattr(self.best, k) for k in GRID_FIELDS},
        }


def grid_points(grids: dict[str, list]) -> list[dict]:
    unknown = set(grids) - set(GRID_FIELDS)
    if unknown:
        raise ValueError(f"unknown grid fields {sorted(unknown)}")
    names = [f for f in GRID_FIELDS if f in grids]
    if any(len(grids[n]) == 0 for n in names):
        raise ValueError("grids must be non-empty")
    return [dict(zip(names, combo)) for combo in itertools.product(*(grids[n] for n in names))]


def _point_name(settings: dict) -> str:
    short = {"batch_size": "bs", "learning_rate": "lr", "embed_size": "es", "num_layers": "nl"}
    return "_".join(f"{short[k]}{v:g}" if isinstance(v, float) else f"{short[k]}{v}" for k, v in settings.items())


def grid_search(rc: RunConfig, grids: dict[str, list] | None = None, epochs: int | None = None,
                seed: int | None = None, dataset: CaptionDataset | None = None,
                write: bool = True) -> GridResult:
    """Train every grid point from the same seed; rank by final-epoch beam-3 validation BLEU-4."""
    grids = PAPER_GRID if grids is None else grids
    if dataset is None:
        dataset = load_dataset(rc.dataset.captions, rc.dataset.features, rc.dataset.permissive)
    grid_dir = rc.run_dir
    entries = []
    for index, settings in enumerate(grid_points(grids)):
        changes = dict(settings, eval_method="beam3")
        if epochs is not None:
            changes["epochs"] = epochs
        if seed is not None:
            changes["seed"] = seed
        try:
            point = replace(rc, name=_point_name(settings), output_dir=str(grid_dir),
                            training=replace(rc.training, **changes))
            result = train_run(point, dataset, write)
            entries.append(GridEntry(index, settings, result.final.val_bleu4, result.records))
        except Exception as exc:  # a failing point is recorded and the search continues
            log.warning("grid point %s failed: %s", settings, exc)
            entries.append(GridEntry(index, settings, None, [], f"{type(exc).__name__}: {exc}"))
    ranked = sorted(entries, key=lambda e: (e.final_bleu4 is None, -(e.final_bleu4 or 0.0), e.index))
    best = None
    if ranked and ranked[0].final_bleu4 is not None:
        best = replace(rc.training, **ranked[0].settings)
    result = GridResult(ranked, best)
    if write:
        write_report(grid_dir / "summary.json", result)
    return result
