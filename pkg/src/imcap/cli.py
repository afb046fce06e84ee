"""Command-line entry point: ``imcap <subcommand> ...`` (or ``python -m imcap``).

Exit codes: 0 on success, 1 on invalid arguments or data, 2 on I/O failure.
Every subcommand that writes files also writes a manifest (arguments, seed,
package version) next to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, default_output_root
from .data_io import load_dataset, read_features, read_json, write_report
from .metrics import evaluate_corpus
from .synthetic import DETECTION_FILE, STREAM_FILES, gen_synthetic, write_synthetic
from .text import DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT, build_vocab, decode, tokenize
from .training import TrainingError, generate, grid_search, one_features, split_dataset, train_run

log = logging.getLogger("imcap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _manifest(path: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    write_report(path, {"command": args.command, "config": config, "seed": args.seed,
                        "version": __version__, **(extra or {})})


def _beside(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_vocab(args) -> int:
    dataset = load_dataset(args.captions, args.features or (), args.permissive)
    ids = dataset.image_ids
    if args.split == "train":
        ids = split_dataset(ids, args.seed)[0]
    vocab = build_vocab((tokenize(c) for i in ids for c in dataset.captions[i]), args.min_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    _manifest(out / "manifest.json", args, {"num_images": len(ids), "vocab_size": len(vocab)})
    print(f"{len(vocab)} ids ({len(vocab.tokens)} words) from {len(ids)} images -> {out / 'vocab.json'}")
    return 0


def cmd_gen_synthetic(args) -> int:
    data = gen_synthetic(args.images, args.vocab_size, args.feature_dim, args.streams, args.seed, args.rows,
                         args.noise, args.detection_classes)
    out = Path(args.out)
    paths = write_synthetic(out, data)
    # starter run config with paths relative to the output directory
    features = list(STREAM_FILES[: args.streams])
    run = {
        "name": "run",
        "dataset": {"captions": "captions.json", "features": features},
        "architecture": {"decoder_kind": "transformer", "adapter_kind": "stacked" if args.streams == 2 else "single"},
        "training": {"seed": args.seed},
        "output_dir": "runs",
    }
    write_report(out / "run.json", run)
    _manifest(out / "manifest.json", args, {"files": sorted(Path(p).name for p in paths.values())})
    det = f", {DETECTION_FILE}" if data.detection is not None else ""
    print(f"{args.images} images, {len(features)} stream(s){det} -> {out}")
    return 0


def _load_run(args) -> RunConfig:
    rc = RunConfig.load(args.config)
    changes = {}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        rc = rc.with_training(**changes)
    if args.output_dir is not None:
        rc = RunConfig(rc.name, rc.dataset, rc.architecture, rc.training, args.output_dir)
    return rc


def cmd_train(args) -> int:
    rc = _load_run(args)
    result = train_run(rc)
    final = result.final
    print(f"{rc.name}: {len(result.records)} epochs, final loss {final.train_loss:.4f}, "
          f"val bleu4 {final.val_bleu4:.4f} (best epoch {result.best_epoch}) -> {result.run_dir}")
    return 0


def cmd_gridsearch(args) -> int:
    rc = _load_run(args)
    grids = None
    if args.grid is not None:
        grids = read_json(args.grid)
        if not isinstance(grids, dict):
            raise UsageError("--grid must hold a JSON object of field -> list of values")
    result = grid_search(rc, grids)
    _manifest(rc.run_dir / "manifest.json", args, {"run_config": rc.to_json()})
    for entry in result.ranked:
        score = "failed" if entry.final_bleu4 is None else f"{entry.final_bleu4:.4f}"
        print(f"{entry.index:3d} {score:>8}  {json.dumps(entry.settings, sort_keys=True)}")
    return 0


def _features_for(model, args, image_id: str):
    kind = model.cfg.adapter_kind
    a = read_features(args.features)
    if image_id not in a:
        raise UsageError(f"image id {image_id!r} not in {args.features}")
    if kind == "stacked":
        if args.features_b is None:
            raise UsageError("stacked models need --features-b")
        b = read_features(args.features_b)
        if image_id not in b:
            raise UsageError(f"image id {image_id!r} not in {args.features_b}")
        return a[image_id], b[image_id]
    return a[image_id]


def cmd_caption(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise UsageError("checkpoint carries no vocabulary")
    max_len = args.max_len or model.cfg.max_len
    ids = generate(model, _features_for(model, args, args.image_id), args.method, max_len, args.beam_width)
    caption = decode(ids, vocab)
    print(caption)
    if args.json_out:
        out = Path(args.json_out)
        write_report(out, {"image_id": args.image_id, "caption": caption, "ids": ids, "method": args.method,
                           "beam_width": args.beam_width if args.method == "beam" else None})
        _manifest(_beside(out), args)
    return 0


def cmd_evaluate(args) -> int:
    model, vocab, meta = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise UsageError("checkpoint carries no vocabulary")
    feats = [args.features] + ([args.features_b] if args.features_b else [])
    dataset = load_dataset(args.captions, feats, args.permissive)
    if args.split == "all":
        ids = dataset.image_ids
    else:
        _, val, test = split_dataset(dataset.image_ids, meta.get("split_seed", args.seed))
        ids = val if args.split == "val" else test
    max_len = args.max_len or model.cfg.max_len
    candidates, references = [], []
    for i in ids:
        out = generate(model, one_features(dataset, i, model.cfg.adapter_kind), args.method, max_len, args.beam_width)
        candidates.append(decode(out, vocab).split())
        references.append([tokenize(c) for c in dataset.captions[i]])
    report = evaluate_corpus(candidates, references, ids)
    out = Path(args.out)
    write_report(out, report)
    _manifest(_beside(out), args)
    print(f"{len(ids)} images: bleu4 {report.bleu4:.4f} meteor {report.meteor:.4f} cider {report.cider:.4f}")
    return 0


def cmd_metrics(args) -> int:
    cands = read_json(args.candidates)
    refs = read_json(args.references)
    if isinstance(refs, dict) and isinstance(refs.get("images"), dict):
        refs = refs["images"]
    if not isinstance(cands, dict) or not isinstance(refs, dict):
        raise UsageError("candidates and references must be JSON objects keyed by image id")
    missing = sorted(set(cands) ^ set(refs))
    if missing:
        raise UsageError(f"image ids not present in both files: {', '.join(missing[:10])}")
    ids = sorted(cands)
    report = evaluate_corpus([tokenize(cands[i]) for i in ids], [[tokenize(r) for r in refs[i]] for i in ids], ids)
    if args.out:
        out = Path(args.out)
        write_report(out, report)
        _manifest(_beside(out), args)
    print(f"bleu4 {report.bleu4:.17g}\nmeteor {report.meteor:.17g}\ncider {report.cider:.17g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    root = default_output_root()
    p = _Parser(prog="imcap", description="Image-captioning toolkit over precomputed feature files.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-vocab", help="build a vocabulary file from a captions JSON")
    s.add_argument("--captions", required=True)
    s.add_argument("--features", action="append", help="feature file(s) to cross-check against")
    s.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)
    s.add_argument("--split", choices=("train", "all"), default="train",
                   help="count words over the seeded training split or every image")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--permissive", action="store_true", help="accept 1-5 captions per image")
    s.add_argument("--out", default=str(Path(root) / "vocab"))
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("gen-synthetic", help="write a synthetic captioning dataset")
    s.add_argument("--images", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vocab-size", type=int, default=24)
    s.add_argument("--feature-dim", type=int, default=32)
    s.add_argument("--streams", type=int, choices=(1, 2), default=1)
    s.add_argument("--rows", type=int, default=1, help="feature rows per image")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--detection-classes", type=int, default=0, help="also write box features with C classes")
    s.add_argument("--out", default=str(Path(root) / "synthetic"))
    s.set_defaults(func=cmd_gen_synthetic)

    for name, func, text in (("train", cmd_train, "train one run config"),
                             ("gridsearch", cmd_gridsearch, "grid search over batch size, lr, embed size, layers")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="run config JSON")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--output-dir")
        if name == "gridsearch":
            s.add_argument("--grid", help="JSON object of field -> values (default: the full grid)")
        s.set_defaults(func=func)

    decode_flags = argparse.ArgumentParser(add_help=False)
    decode_flags.add_argument("--checkpoint", required=True)
    decode_flags.add_argument("--features", required=True, help="feature file (stream a)")
    decode_flags.add_argument("--features-b", help="second feature file for stacked models")
    decode_flags.add_argument("--method", choices=("greedy", "beam"), default="beam")
    decode_flags.add_argument("--beam-width", type=int, default=3)
    decode_flags.add_argument("--max-len", type=int, default=0, help=f"0 uses the model's limit ({DEFAULT_MAX_LEN})")
    decode_flags.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("caption", parents=[decode_flags], help="caption one image")
    s.add_argument("--image-id", required=True)
    s.add_argument("--json-out")
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("evaluate", parents=[decode_flags], help="decode a split and score it")
    s.add_argument("--captions", required=True)
    s.add_argument("--split", choices=("val", "test", "all"), default="test")
    s.add_argument("--permissive", action="store_true")
    s.add_argument("--out", default=str(Path(root) / "evaluation.json"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("metrics", help="score candidate captions against references")
    s.add_argument("--candidates", required=True, help='JSON {"image_id": "caption", ...}')
    s.add_argument("--references", required=True, help='JSON {"image_id": ["ref", ...], ...}')
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"imcap: I/O error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, TrainingError, ValueError) as exc:
        print(f"imcap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
