"""
Subwords, hashed unknowns and the two-table position code
=========================================================

Run with ``python3 notebooks/01_tokens_and_positions.py``.
"""

import numpy as np

from convertlite.tokenizer import SubwordVocab, VocabConfig, build_vocab, subword_pieces, tokenize

# %%
# A vocabulary is grown from raw lines. Anything seen fewer than
# ``min_frequency`` times is dropped, so rare words fall apart into pieces.
lines = ["the kettle is boiling", "is the kettle on", "kettles and kettlebells"] * 40
lines += ["a kettlebell workout"] * 3
vocab = build_vocab(lines, VocabConfig(min_frequency=20, oov_buckets=16))
print(vocab.size, "subwords")
for text in ["the kettle", "kettlebell", "workout"]:
    print(f"{text!r:16} ->", subword_pieces(text, vocab))

# %%
# Characters never seen at all get one of the hash buckets that sit after
# the vocabulary ids. Same character, same bucket, on every machine.
seq = tokenize("kettle ☃ ☃", vocab)
print(seq.ids, "first bucket id:", vocab.size)

# %%
# Sequences are capped at 60 subwords; the tail is dropped.
long = tokenize(" ".join(["the"] * 100), vocab)
print("length after truncation:", long.length)

# %%
# Positions are encoded as the sum of two learned tables indexed mod 47 and
# mod 11. Because 47 and 11 are coprime the pair repeats only every 517 steps.
pairs = {(i % 47, i % 11) for i in range(517)}
print(len(pairs), "distinct pairs in 0..516;",
      "517 collides with 0:", (517 % 47, 517 % 11) == (0, 0))

# a tiny picture: which slots of the two tables are active for the first 60 positions
grid = np.zeros((11, 60), dtype=int)
for i in range(60):
    grid[i % 11, i] = 1
for row in grid:
    print("".join("#" if v else "." for v in row))

# %%
# Vocabularies are plain text files with a one-line header.
print(vocab.dumps().splitlines()[0])
assert SubwordVocab.loads(vocab.dumps()).digest() == vocab.digest()
