import math

import numpy as np
import pytest

from imcap import autodiff as ad
from imcap.config import ArchitectureOptions, DatasetPaths, RunConfig, TrainConfig
from imcap.data_io import CaptionDataset, read_json, read_jsonl
from imcap.metrics import evaluate_corpus
from imcap.models import ArchitectureConfig, Captioner, ConfigError
from imcap.synthetic import gen_synthetic
from imcap.text import build_vocab, decode, tokenize
from imcap.training import (
    AdamState, RunRngs, TrainingError, adam_step, clip_grad_norm, generate, grid_points, grid_search,
    one_features, sample_reference, sgd_step, split_dataset, train_epoch, train_run, validate,
)


def toy_dataset(n=24, seed=0, streams=1, **kw):
    data = gen_synthetic(n, vocab_size=8, feature_dim=8, streams=streams, seed=seed, **kw)
    return CaptionDataset(data.captions, data.streams)


def toy_config(tmp_path, adapter="single", decoder="transformer", **training):
    defaults = dict(batch_size=8, learning_rate=3e-3, embed_size=16, num_layers=1, epochs=3, seed=0,
                    max_len=14, min_count=1, dtype="float64", allow_off_grid=True, beam_every=2)
    defaults.update(training)
    feats = ("a.icfr", "b.icfr") if adapter == "stacked" else ("a.icfr",)
    return RunConfig(
        name="toy", dataset=DatasetPaths("captions.json", feats),
        architecture=ArchitectureOptions(decoder, adapter, num_heads=2, dropout=0.0),
        training=TrainConfig(**defaults), output_dir=str(tmp_path),
    )


# ---------------------------------------------------------------------------
# splits and sampling


@pytest.mark.parametrize("n, sizes", [(100, (85, 10, 5)), (20, (17, 2, 1)), (33, (28, 3, 2))])
def test_split_sizes(n, sizes):
    ids = [f"i{k:03d}" for k in range(n)]
    parts = split_dataset(ids, seed=5)
    assert tuple(map(len, parts)) == sizes
    assert sorted(sum(parts, [])) == ids
    assert split_dataset(list(reversed(ids)), seed=5) == parts
    assert split_dataset(ids, seed=6) != parts


def test_split_needs_twenty_images():
    with pytest.raises(ValueError):
        split_dataset([str(k) for k in range(19)], 0)


def test_sample_reference_is_uniform():
    refs = [f"r{k}" for k in range(5)]
    rng = np.random.default_rng(123)
    draws = [sample_reference(refs, rng) for _ in range(10_000)]
    counts = np.array([draws.count(r) for r in refs])
    assert np.all(np.abs(counts - 2000) <= 200)
    chi2 = float(((counts - 2000) ** 2 / 2000).sum())
    assert chi2 < 18.47  # 0.999 quantile, 4 degrees of freedom
    assert sample_reference(["only"], rng) == "only"
    a = [sample_reference(refs, np.random.default_rng(9)) for _ in range(3)]
    assert a == [sample_reference(refs, np.random.default_rng(9)) for _ in range(3)]
    with pytest.raises(ValueError):
        sample_reference([], rng)


# ---------------------------------------------------------------------------
# optimizers


def _param(value, grad):
    p = ad.Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_sgd_step():
    p = _param([1.0], [2.0])
    sgd_step({"p": p}, 0.1)
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    q = _param([1.5, -2.0], [0.0, 0.0])
    sgd_step({"q": q}, 0.1)
    assert np.array_equal(q.data, [1.5, -2.0])


def test_adam_first_step_moves_by_lr():
    for g in (3.0, -0.02, 0.5):
        p = _param([0.5], [g])
        adam_step({"p": p}, 1e-3, AdamState())
        assert abs(abs(p.data[0] - 0.5) - 1e-3) < 1e-9
        assert np.sign(0.5 - p.data[0]) == np.sign(g)
    # exact first step is lr * |g| / (|g| + eps); eps is visible once |g| nears it
    p = _param([0.5], [1e-6])
    adam_step({"p": p}, 1e-3, AdamState())
    assert 0.5 - p.data[0] == pytest.approx(1e-3 * 1e-6 / (1e-6 + 1e-8), rel=1e-9)


def test_adam_matches_closed_form_over_steps():
    p = _param([0.0], [0.0])
    state = AdamState()
    m = v = 0.0
    ref = 0.0
    for t, g in enumerate([1.0, -0.5, 0.25, 2.0], start=1):
        p.grad = np.array([g])
        adam_step({"p": p}, 0.01, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(ref, abs=1e-15)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError, match="bad"):
        sgd_step({"ok": _param([1.0], [1.0]), "bad": _param([1.0], [np.inf])}, 0.1)
    with pytest.raises(TrainingError, match="bad"):
        adam_step({"bad": _param([1.0], [np.nan])}, 0.1, AdamState())


def test_clip_grad_norm():
    a, b = _param([0.0, 0.0], [3.0, 0.0]), _param([0.0], [4.0])
    assert clip_grad_norm({"a": a, "b": b}, 5.0) == pytest.approx(5.0)
    assert np.array_equal(a.grad, [3.0, 0.0])
    clip_grad_norm({"a": a, "b": b}, 1.0)
    assert math.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# epochs


def _epoch_setup(tmp_path, ds=None, **training):
    rc = toy_config(tmp_path, **training)
    ds = ds or toy_dataset()
    ids = ds.image_ids
    vocab = build_vocab((tokenize(c) for i in ids for c in ds.captions[i]), 1)
    cfg = ArchitectureConfig("transformer", "single", 16, 1, len(vocab), input_dim=8, num_heads=2,
                             max_len=14, dropout=0.0, dtype="float64")
    return rc, ds, ids, vocab, Captioner(cfg, seed=1)


def test_zero_learning_rate_leaves_params_unchanged(tmp_path):
    rc, ds, ids, vocab, model = _epoch_setup(tmp_path, learning_rate=0.0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    loss = train_epoch(model, ds, ids, vocab, rc.training, RunRngs.from_seed(0), AdamState())
    assert math.isfinite(loss)
    assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())


def test_loss_decreases_on_repeated_example(tmp_path):
    ds = toy_dataset(1)
    rc, ds, ids, vocab, model = _epoch_setup(tmp_path, ds=ds, reference_sampling="first")
    ids = ids * 8
    rngs, state = RunRngs.from_seed(0), AdamState()
    losses = [train_epoch(model, ds, ids, vocab, rc.training, rngs, state) for _ in range(5)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("decoder", ["transformer", "lstm"])
def test_fresh_model_loss_is_near_log_vocab(decoder):
    vocab_size = 60
    cfg = ArchitectureConfig(decoder, "single", 64, 1, vocab_size, input_dim=8, dropout=0.0, dtype="float64")
    model = Captioner(cfg, seed=2)
    rng = np.random.default_rng(0)
    seqs = np.concatenate([np.full((32, 1), 1), rng.integers(2, vocab_size, size=(32, 12))], axis=1)
    feats = rng.standard_normal((32, 1, 8))
    with ad.no_grad():
        loss = float(model.loss(seqs, model.encode(feats)).data)
    assert 0.85 * math.log(vocab_size) <= loss <= 1.15 * math.log(vocab_size)


def test_empty_training_set_rejected(tmp_path):
    rc, ds, ids, vocab, model = _epoch_setup(tmp_path)
    with pytest.raises(TrainingError):
        train_epoch(model, ds, [], vocab, rc.training, RunRngs.from_seed(0), AdamState())
    with pytest.raises(TrainingError):
        validate(model, ds, [], vocab, rc.training)


def test_rng_streams_are_independent():
    a, b = RunRngs.from_seed(4), RunRngs.from_seed(4)
    assert a.init_seed == b.init_seed
    assert a.shuffle.integers(1 << 30) == b.shuffle.integers(1 << 30)
    assert a.reference.integers(1 << 30) != a.dropout.integers(1 << 30)


# ---------------------------------------------------------------------------
# validation and runs


def test_validation_of_memorized_image_scores_one(tmp_path):
    ds = toy_dataset(1, seed=3)
    rc = toy_config(tmp_path, learning_rate=1e-2, reference_sampling="first", split="all", epochs=60,
                    eval_method="greedy", val_every=60)
    result = train_run(rc, ds, write=False)
    tc = rc.training
    report = validate(result.model, ds, ds.image_ids, result.vocab, tc, "greedy")
    assert report.bleu4 == 1.0
    image = ds.image_ids[0]
    ids = generate(result.model, one_features(ds, image, "single"), "greedy", tc.max_len)
    direct = evaluate_corpus([decode(ids, result.vocab).split()], [[tokenize(c) for c in ds.captions[image]]], [image])
    assert direct == report
    assert validate(result.model, ds, ds.image_ids, result.vocab, tc, "greedy") == report


def test_train_run_writes_outputs_and_reproduces(tmp_path):
    ds = toy_dataset(24)
    rc = toy_config(tmp_path / "one")
    result = train_run(rc, ds)
    run = rc.run_dir
    for name in ("epochs.jsonl", "timing.jsonl", "vocab.json", "manifest.json", "best.ickp", "final.ickp"):
        assert (run / name).exists(), name
    records = read_jsonl(run / "epochs.jsonl")
    assert [r["epoch"] for r in records] == [1, 2, 3]
    assert [r["eval_method"] for r in records] == ["greedy", "beam3", "beam3"]
    assert all(0.0 <= r["val_bleu4"] <= 1.0 and math.isfinite(r["train_loss"]) for r in records)
    assert read_json(run / "manifest.json")["seed"] == 0
    assert result.best_epoch in (1, 2, 3)
    again = toy_config(tmp_path / "two")
    train_run(again, ds)
    for name in ("epochs.jsonl", "best.ickp", "final.ickp", "vocab.json"):
        assert (run / name).read_bytes() == (again.run_dir / name).read_bytes()


@pytest.mark.parametrize("adapter, decoder", [("stacked", "transformer"), ("single", "lstm"),
                                              ("detection", "transformer")])
def test_train_run_other_architectures(tmp_path, adapter, decoder):
    if adapter == "detection":
        data = gen_synthetic(24, vocab_size=8, feature_dim=8, detection_classes=3)
        ds = CaptionDataset(data.captions, [data.detection])
    else:
        ds = toy_dataset(24, streams=2 if adapter == "stacked" else 1)
    rc = toy_config(tmp_path, adapter=adapter, decoder=decoder, epochs=2)
    result = train_run(rc, ds, write=False)
    assert len(result.records) == 2 and result.final.val_bleu4 is not None


def test_unconditioned_baseline_ignores_features(tmp_path):
    ds = toy_dataset(24)
    rc = toy_config(tmp_path, epochs=2, condition_on_image=False)
    result = train_run(rc, ds, write=False)
    outs = {tuple(generate(result.model, one_features(ds, i, "single", False), "greedy", 14)) for i in ds.image_ids}
    assert len(outs) == 1


# ---------------------------------------------------------------------------
# configs


def test_train_config_enforces_grid():
    TrainConfig(batch_size=128, learning_rate=5e-4, embed_size=512, num_layers=4)
    for bad in ({"batch_size": 32}, {"learning_rate": 1e-2}, {"embed_size": 128}, {"num_layers": 3},
                {"epochs": 0}, {"optimizer": "rmsprop"}, {"eval_method": "beam5"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    assert TrainConfig(embed_size=16, allow_off_grid=True).embed_size == 16


def test_run_config_json_round_trip_and_unknown_keys(tmp_path):
    rc = toy_config(tmp_path)
    obj = rc.to_json()
    assert RunConfig.from_json(obj) == rc
    with pytest.raises(ConfigError):
        RunConfig.from_json({**obj, "extra": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_json({**obj, "training": {**obj["training"], "momentum": 0.9}})
    with pytest.raises(ConfigError):
        RunConfig.from_json({**obj, "dataset": {"captions": "c.json", "features": ["a", "b"]}})
    rel = RunConfig.from_json({"name": "x", "dataset": {"captions": "c.json", "features": ["f.icfr"]}}, tmp_path)
    assert rel.dataset.captions == str(tmp_path / "c.json")


# ---------------------------------------------------------------------------
# grid search


def test_grid_points_order():
    pts = grid_points({"learning_rate": [1e-3, 5e-4], "batch_size": [64, 128]})
    assert pts == [{"batch_size": 64, "learning_rate": 1e-3}, {"batch_size": 64, "learning_rate": 5e-4},
                   {"batch_size": 128, "learning_rate": 1e-3}, {"batch_size": 128, "learning_rate": 5e-4}]
    assert len(grid_points({"batch_size": [64, 128], "learning_rate": [1e-3, 5e-4], "embed_size": [256, 512],
                            "num_layers": [1, 2, 4]})) == 24
    with pytest.raises(ValueError):
        grid_points({"dropout": [0.1]})
    with pytest.raises(ValueError):
        grid_points({"batch_size": []})


def test_single_point_grid_equals_plain_run(tmp_path):
    ds = toy_dataset(24)
    rc = toy_config(tmp_path, epochs=2, eval_method="beam3")
    grid = grid_search(rc, {"learning_rate": [3e-3]}, dataset=ds)
    plain = train_run(rc, ds, write=False)
    assert len(grid.ranked) == 1
    assert [r.to_json() for r in grid.ranked[0].records] == [r.to_json() for r in plain.records]
    assert read_json(rc.run_dir / "summary.json")["ranked"][0]["final_bleu4"] == plain.final.val_bleu4


def test_grid_ranking_is_reproducible_and_records_failures(tmp_path):
    ds = toy_dataset(24)
    rc = toy_config(tmp_path, epochs=2)
    grids = {"learning_rate": [1e-3, 5e-4, -1.0]}
    a = grid_search(rc, grids, dataset=ds, write=False)
    b = grid_search(rc, grids, dataset=ds, write=False)
    assert [e.index for e in a.ranked] == [e.index for e in b.ranked]
    assert [e.final_bleu4 for e in a.ranked] == [e.final_bleu4 for e in b.ranked]
    failed = a.ranked[-1]
    assert failed.index == 2 and failed.final_bleu4 is None and "learning_rate" in failed.error
    scores = [e.final_bleu4 for e in a.ranked[:2]]
    assert scores == sorted(scores, reverse=True)
    assert a.best.learning_rate in (1e-3, 5e-4)
    assert a.ranked[0].records[-1].eval_method == "beam3"
