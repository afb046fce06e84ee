"""Greedy versus beam decoding on an untrained transformer, then a checkpoint round trip."""
import tempfile
from pathlib import Path

import numpy as np

from imcap.checkpoint import load_checkpoint, save_checkpoint
from imcap.decoding import beam_search_decode, greedy_decode, score_sequence
from imcap.models import ArchitectureConfig, Captioner
from imcap.text import Vocabulary, decode

vocab = Vocabulary(tuple("a dog cat runs sits on the mat grass".split()), min_count=1)
cfg = ArchitectureConfig("transformer", "single", embed_size=32, num_layers=2, vocab_size=len(vocab),
                         input_dim=16, num_heads=4, max_len=10, dropout=0.0)
model = Captioner(cfg, seed=5)
feats = np.random.default_rng(1).standard_normal((1, 16)).astype(np.float32)
enc = model.encode_one(feats)

g = greedy_decode(model, enc, cfg.max_len)
trace = []
b = beam_search_decode(model, enc, cfg.max_len, beam_width=3, trace=trace)
for name, ids in (("greedy", g), ("beam3", b)):
    print(f"{name:6s} {decode(ids, vocab)!r:50s} logp={score_sequence(model, enc, ids):.3f}")
print("beam steps traced:", len(trace))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ickp"
    save_checkpoint(path, model, vocab, {"seed": 5})
    back, vocab2, meta = load_checkpoint(path)
    print("checkpoint bytes:", path.stat().st_size, "meta:", meta)
    print("same greedy caption after reload:", greedy_decode(back, back.encode_one(feats), cfg.max_len) == g)
