"""Score a few hand-written captions with BLEU-4, METEOR and CIDEr."""
from imcap.metrics import bleu4_sentence, evaluate_corpus, ngram_counts
from imcap.text import tokenize

refs = {
    "beach": ["A dog runs along the beach.", "a brown dog running on sand", "the dog plays near the sea"],
    "kitchen": ["A man cooks dinner in a kitchen.", "someone is cooking at the stove"],
    "park": ["Two children play football in the park.", "kids kick a ball on the grass"],
}
cands = {
    "beach": "a dog runs along the sand .",
    "kitchen": "a man cooks dinner in the kitchen",
    "park": "two kids play football on the grass",
}

# tokenization lowercases and splits punctuation off
print(tokenize(refs["beach"][0]))
print(ngram_counts(tokenize(cands["beach"]), 2).most_common(3))

ids = sorted(cands)
c = [tokenize(cands[i]) for i in ids]
r = [[tokenize(x) for x in refs[i]] for i in ids]

for i, cand, rs in zip(ids, c, r):
    print(f"{i:8s} sentence bleu4 = {bleu4_sentence(cand, rs):.4f}")

report = evaluate_corpus(c, r, ids)
print(f"corpus   bleu4={report.bleu4:.4f} meteor={report.meteor:.4f} cider={report.cider:.4f}")

# a candidate identical to its only reference hits the ceiling
same = evaluate_corpus([tokenize("two cats sleep on a red sofa")], [[tokenize("two cats sleep on a red sofa")]])
print("identical:", same.bleu4, round(same.meteor, 4))
