"""Tiny-model fixtures shared by model, decoding and acceptance tests."""

import itertools

import numpy as np

from imcap import autodiff as ad
from imcap.models import ArchitectureConfig, Captioner
from imcap.decoding import beam_search_decode, score_sequence
from imcap.text import EOS_ID, PAD_ID, SOS_ID


def tiny_config(decoder="transformer", adapter="single", vocab=11, embed=8, layers=1, heads=2,
                max_len=8, classes=3, boxes=3, dtype="float64", **kw):
    return ArchitectureConfig(
        decoder_kind=decoder, adapter_kind=adapter, embed_size=embed, num_layers=layers, vocab_size=vocab,
        input_dim=6, input_dim_b=5, max_len=max_len, num_heads=heads, ffn_size=2 * embed, dropout=0.0,
        max_boxes=boxes, num_classes=classes if adapter == "detection" else 0, dtype=dtype, **kw,
    )


def tiny_features(cfg, rng, batch=None):
    """Random raw features in the layout ``Captioner.encode`` expects."""
    def one():
        if cfg.adapter_kind == "single":
            return rng.standard_normal((1 if cfg.decoder_kind == "lstm" else 2, cfg.input_dim))
        if cfg.adapter_kind == "stacked":
            return rng.standard_normal((1, cfg.input_dim)), rng.standard_normal((3, cfg.input_dim_b))
        n = int(rng.integers(1, cfg.max_boxes + 1))
        boxes = np.zeros((n, 4 + cfg.num_classes))
        boxes[:, :4] = rng.uniform(0, 1, size=(n, 4))
        boxes[np.arange(n), 4 + rng.integers(0, cfg.num_classes, size=n)] = 1.0
        return boxes

    if batch is None:
        return one()
    items = [one() for _ in range(batch)]
    if cfg.adapter_kind == "single":
        return np.stack(items)
    if cfg.adapter_kind == "stacked":
        return np.stack([a for a, _ in items]), np.stack([b for _, b in items])
    return items


def tiny_sequences(cfg, rng, batch, length):
    """Random SOS ... EOS sequences of ``length`` ids (generated tokens avoid specials)."""
    body = rng.integers(4, cfg.vocab_size, size=(batch, length - 2))
    return np.concatenate([np.full((batch, 1), SOS_ID), body, np.full((batch, 1), EOS_ID)], axis=1)


def model_grad_check(model, feats, seqs, h=1e-4):
    """Max relative error between autodiff and central differences, per parameter."""
    def loss():
        return model.loss(seqs, model.encode(feats))

    for p in model.params.values():
        p.grad = None
    ad.backward(loss())
    analytic = {name: p.grad.copy() for name, p in model.params.items()}
    errors = {}
    with ad.no_grad():
        for name, p in model.params.items():
            numeric = np.empty_like(p.data)
            for idx in np.ndindex(*p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + h
                fp = float(loss().data)
                p.data[idx] = orig - h
                fm = float(loss().data)
                p.data[idx] = orig
                numeric[idx] = (fp - fm) / (2 * h)
            errors[name] = float(ad.relative_error(analytic[name], numeric).max())
    return errors, analytic


ARCHITECTURES = [("lstm", "single"), ("transformer", "single"), ("transformer", "detection"),
                 ("transformer", "stacked")]


def random_tiny_model(decoder, adapter, seed, **kw):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(decoder, adapter, **kw)
    return Captioner(cfg, seed=int(rng.integers(1 << 30))), rng


def all_finished_sequences(vocab, max_len):
    """Every complete sequence: ends in EOS, or reaches max_len ids."""
    tokens = [t for t in range(vocab) if t not in (PAD_ID, SOS_ID)]
    out = []
    for n in range(1, max_len):
        for body in itertools.product(tokens, repeat=n):
            if EOS_ID in body[:-1]:
                continue
            if body[-1] != EOS_ID and n + 1 < max_len:
                continue
            out.append([SOS_ID, *body])
    return out


def check_beam_pruning(model, enc, vocab, max_len, width):
    """Replay a traced beam search against brute-force expansion of each live set; return its output."""
    trace = []
    out = beam_search_decode(model, enc, max_len, width, trace=trace)
    live = [([SOS_ID], 0.0)]
    retired = 0
    for step in trace:
        # brute-force single-step expansion of the previous live set
        children = []
        for ids, total in live:
            for tok in range(vocab):
                if tok in (PAD_ID, SOS_ID):
                    continue
                lp = score_sequence(model, enc, ids + [tok]) - score_sequence(model, enc, ids)
                children.append((ids + [tok], total + lp))
        children.sort(key=lambda c: (-c[1], c[0]))
        assert step.live_width == width - retired
        keep = min(step.live_width, len(children))
        assert [h.ids for h in step.kept] == [c[0] for c in children[:keep]]
        for h, c in zip(step.kept, children):
            assert abs(h.logprob_sum - c[1]) < 1e-9
        for h in step.kept:
            assert EOS_ID not in h.ids[1:-1] and len(h.ids) <= max_len
        retired += len(step.retired)
        live = [(h.ids, h.logprob_sum) for h in step.kept if h not in step.retired]
    assert not live
    return out


def relu_margin(model, feats, seqs) -> float:
    """Smallest |input| seen by any ReLU in one loss evaluation (inf if none).

    Central differences are only meaningful when no ReLU input sits within a
    step of its kink, so gradient checks discard instances with a small margin.
    """
    seen = []
    original = ad.relu

    def spy(x):
        seen.append(float(np.abs(x.data).min()))
        return original(x)

    ad.relu = spy
    try:
        with ad.no_grad():
            model.loss(seqs, model.encode(feats))
    finally:
        ad.relu = original
    return min(seen, default=float("inf"))
