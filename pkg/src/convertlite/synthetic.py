"""Synthetic conversational corpora with a planted keyword link."""
from __future__ import annotations

import numpy as np

from .training import CorpusRecord

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def pseudo_words(n: int, rng: np.random.Generator, syllables=(2, 3)) -> list:
    words = set()
    while len(words) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        words.add("".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                          for _ in range(k)))
    return sorted(words)


def _sentence(fillers, rng, keyword=None, length=(3, 6)) -> str:
    n = int(rng.integers(length[0], length[1] + 1))
    words = list(rng.choice(fillers, size=n))
    if keyword is not None:
        words.insert(int(rng.integers(n + 1)), keyword)
    return " ".join(words)


def keyword_pairs(n_pairs: int = 5000, n_keywords: int = 500, n_fillers: int = 150,
                  seed: int = 0):
    """(records, keyword index per record): the response repeats its context's keyword."""
    rng = np.random.default_rng(seed)
    vocab = pseudo_words(n_keywords + n_fillers, rng)
    order = rng.permutation(len(vocab))
    keywords = [vocab[i] for i in order[:n_keywords]]
    fillers = [vocab[i] for i in order[n_keywords:]]
    records, groups = [], []
    for _ in range(n_pairs):
        g = int(rng.integers(n_keywords))
        kw = keywords[g]
        records.append(CorpusRecord(_sentence(fillers, rng, kw), _sentence(fillers, rng, kw)))
        groups.append(g)
    return records, groups


def history_pairs(n_pairs: int = 5000, n_keywords: int = 500, n_fillers: int = 150,
                  n_turns: int = 3, turn_length=(3, 6), seed: int = 0):
    """The keyword sits in one earlier turn only; the immediate context is filler."""
    rng = np.random.default_rng(seed)
    vocab = pseudo_words(n_keywords + n_fillers, rng)
    order = rng.permutation(len(vocab))
    keywords = [vocab[i] for i in order[:n_keywords]]
    fillers = [vocab[i] for i in order[n_keywords:]]
    records, groups = [], []
    for _ in range(n_pairs):
        g = int(rng.integers(n_keywords))
        kw = keywords[g]
        turns = [_sentence(fillers, rng, length=turn_length) for _ in range(n_turns)]
        turns[int(rng.integers(n_turns))] = _sentence(fillers, rng, kw, turn_length)
        records.append(CorpusRecord(_sentence(fillers, rng), _sentence(fillers, rng, kw),
                                    turns))
        groups.append(g)
    return records, groups


def corpus_lines(records) -> list:
    lines = []
    for r in records:
        lines.extend([r.context, r.response, *r.extra_contexts])
    return lines


def split(records, groups, n_test: int, seed: int = 0):
    """Deterministic train/test split of aligned records and group labels."""
    rng = np.random.default_rng(seed + 7)
    order = rng.permutation(len(records))
    test, train = order[:n_test], order[n_test:]
    pick = lambda idx, xs: [xs[i] for i in idx]  # noqa: E731
    return (pick(train, records), pick(train, groups), pick(test, records), pick(test, groups))
