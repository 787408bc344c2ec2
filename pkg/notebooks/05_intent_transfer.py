"""
Reusing the frozen context tower for intent classification
==========================================================

A keyword-trained encoder is frozen; a two-layer classifier is fit on its
1024-d (here 256-d) reduced representations with a small grid search.

Run with ``python3 notebooks/05_intent_transfer.py [steps]`` (default 300).
"""

import sys

import numpy as np

from convertlite.experiments import keyword_task
from convertlite.intent import IntentDataset, classify, train_intent_classifier

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
run = keyword_task(steps=steps, eval_every=steps)
model = run.model
print("encoder R_20@1:", round(run.final_recall, 3))

# %%
# Labels: which of four keyword families the utterance mentions.
rng = np.random.default_rng(0)
keywords = sorted({w for r in run.test_records for w in r.context.split()
                   if model.vocab.id_of(w) is not None})[:4]
fillers = [w for r in run.test_records[:50] for w in r.context.split()]
texts, labels = [], []
for _ in range(400):
    k = int(rng.integers(len(keywords)))
    words = list(rng.choice(fillers, 4))
    words.insert(int(rng.integers(5)), keywords[k])
    texts.append(" ".join(words))
    labels.append(f"intent_{k}")
train, dev, test = IntentDataset(texts, labels).split(seed=0)

# %%
feats = {name: model.encode_r_texts(part.texts) for name, part in
         (("train", train), ("dev", dev), ("test", test))}
clf = train_intent_classifier(feats["train"], train.labels, feats["dev"], dev.labels,
                              hidden_grid=(64,), dropout_grid=(0.0, 0.5), lr_grid=(0.03, 0.1))
print(f"picked hidden={clf.hidden} dropout={clf.dropout} lr={clf.lr}")
print("test accuracy:", round(clf.accuracy(feats["test"], test.labels), 3))

label, probs = classify(model.encode_r_texts([test.texts[0]])[0], clf)
print(test.texts[0], "->", label, np.round(probs, 3))
