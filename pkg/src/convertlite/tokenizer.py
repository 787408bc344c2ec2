"""Subword vocabulary induction and greedy longest-prefix tokenization.

Out-of-vocabulary characters are hashed (64-bit FNV-1a over their UTF-8 bytes)
into a block of extra bucket ids that follows the subword ids.
"""
from __future__ import annotations

import hashlib
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
HASH_NAME = "fnv1a64"
MAX_SEQ_LEN = 60

_DIGIT_RUN_CACHE: dict[int, re.Pattern] = {}


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class VocabConfig:
    min_frequency: int = 250
    max_subword_chars: int = 20
    max_consecutive_digits: int = 4
    iterations: int = 4
    oov_buckets: int = 1000

    def __post_init__(self):
        if self.min_frequency < 1:
            raise VocabError("min_frequency must be >= 1")
        if self.max_subword_chars < 1 or self.iterations < 1 or self.oov_buckets < 1:
            raise VocabError("max_subword_chars, iterations and oov_buckets must be >= 1")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self):
        return len(self.ids)


@dataclass
class SubwordVocab:
    subwords: list[str]
    oov_buckets: int = 1000
    min_frequency: int = 250
    max_subword_chars: int = 20
    max_consecutive_digits: int = 4
    iterations: int = 4
    max_seq_len: int = MAX_SEQ_LEN
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _longest: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.subwords)}
        if len(self._index) != len(self.subwords):
            raise VocabError("duplicate subwords in vocabulary")
        self._longest = max((len(s) for s in self.subwords), default=0)

    @property
    def size(self) -> int:
        return len(self.subwords)

    @property
    def total_ids(self) -> int:
        return self.size + self.oov_buckets

    def id_of(self, subword: str) -> int | None:
        return self._index.get(subword)

    def oov_id(self, char: str) -> int:
        return self.size + fnv1a64(char.encode("utf-8")) % self.oov_buckets

    def with_oov_buckets(self, n: int) -> "SubwordVocab":
        return SubwordVocab(
            list(self.subwords), n, self.min_frequency, self.max_subword_chars,
            self.max_consecutive_digits, self.iterations, self.max_seq_len,
        )

    def digest(self) -> bytes:
        """SHA-256 over the serialized vocabulary; identifies it inside model files."""
        return hashlib.sha256(self.dumps().encode("utf-8")).digest()

    def dumps(self) -> str:
        header = (
            f"#convertlite-vocab size={self.size} oov_buckets={self.oov_buckets} "
            f"hash={HASH_NAME} min_frequency={self.min_frequency} "
            f"max_subword_chars={self.max_subword_chars} "
            f"max_consecutive_digits={self.max_consecutive_digits} "
            f"iterations={self.iterations} max_seq_len={self.max_seq_len}"
        )
        return "\n".join([header, *self.subwords]) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "SubwordVocab":
        lines = text.split("\n")
        if not lines or not lines[0].startswith("#convertlite-vocab"):
            raise VocabError("missing vocabulary header line")
        fields = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
        if fields.get("hash") != HASH_NAME:
            raise VocabError(f"unsupported OOV hash {fields.get('hash')!r}")
        size = int(fields["size"])
        subwords = lines[1:1 + size]
        if len(subwords) != size:
            raise VocabError(f"vocabulary file truncated: expected {size} subwords")
        return cls(
            subwords,
            oov_buckets=int(fields["oov_buckets"]),
            min_frequency=int(fields.get("min_frequency", 250)),
            max_subword_chars=int(fields.get("max_subword_chars", 20)),
            max_consecutive_digits=int(fields.get("max_consecutive_digits", 4)),
            iterations=int(fields.get("iterations", 4)),
            max_seq_len=int(fields.get("max_seq_len", MAX_SEQ_LEN)),
        )

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or unicodedata.category(ch) in ("Mn", "Mc")


def pretokenize(text: str) -> list[str]:
    """Lowercase, then split into alphanumeric runs and single punctuation marks."""
    words = []
    buf = []
    for ch in text.lower():
        if _is_word_char(ch):
            buf.append(ch)
            continue
        if buf:
            words.append("".join(buf))
            buf = []
        if not ch.isspace():
            words.append(ch)
    if buf:
        words.append("".join(buf))
    return words


def _digit_run_ok(s: str, limit: int) -> bool:
    pat = _DIGIT_RUN_CACHE.get(limit)
    if pat is None:
        pat = _DIGIT_RUN_CACHE[limit] = re.compile(r"\d{%d}" % (limit + 1))
    return pat.search(s) is None


def _segment(word: str, known: dict[str, int] | set, longest: int) -> list[str]:
    """Greedy longest-prefix split; unknown characters become singletons."""
    pieces = []
    pos = 0
    n = len(word)
    while pos < n:
        for end in range(min(n, pos + longest), pos, -1):
            if word[pos:end] in known:
                pieces.append(word[pos:end])
                pos = end
                break
        else:
            pieces.append(word[pos])
            pos += 1
    return pieces


def build_vocab(corpus: Iterable[str], config: VocabConfig | None = None) -> SubwordVocab:
    """Induce a subword inventory by iterated frequency counting.

    Each iteration segments every word with the current inventory, counts all
    substrings that start at a segment boundary, and keeps the ones above
    ``min_frequency``, longest first, discounting their prefixes so a frequent
    long piece does not also promote every one of its prefixes.
    """
    config = config or VocabConfig()
    word_counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        word_counts.update(pretokenize(line))
    if n_lines == 0 or not word_counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")

    limit = config.max_subword_chars
    digits = config.max_consecutive_digits
    # deterministic traversal: by count desc, then lexicographic
    words = sorted(word_counts.items(), key=lambda kv: (-kv[1], kv[0]))

    current: set[str] = set()
    longest = 1
    for _ in range(config.iterations):
        counts: dict[str, int] = defaultdict(int)
        for word, c in words:
            start = 0
            for piece in _segment(word, current, longest):
                stop = min(len(word), start + limit)
                for end in range(start + 1, stop + 1):
                    counts[word[start:end]] += c
                start += len(piece)
        by_len: dict[int, list[str]] = defaultdict(list)
        for s in counts:
            by_len[len(s)].append(s)
        kept = []
        for length in sorted(by_len, reverse=True):
            for s in sorted(by_len[length]):
                c = counts[s]
                if c < config.min_frequency or not _digit_run_ok(s, digits):
                    continue
                kept.append((c, s))
                for k in range(1, length):
                    counts[s[:k]] -= c
        current = {s for _, s in kept}
        longest = max((len(s) for s in current), default=1)
        final = sorted(kept, key=lambda cs: (-cs[0], cs[1]))

    return SubwordVocab(
        [s for _, s in final],
        oov_buckets=config.oov_buckets,
        min_frequency=config.min_frequency,
        max_subword_chars=config.max_subword_chars,
        max_consecutive_digits=config.max_consecutive_digits,
        iterations=config.iterations,
    )


def tokenize_words(words: Iterable[str], vocab: SubwordVocab) -> list[int]:
    ids = []
    index = vocab._index
    longest = max(vocab._longest, 1)
    for word in words:
        for piece in _segment(word, index, longest):
            i = index.get(piece)
            ids.append(vocab.oov_id(piece) if i is None else i)
    return ids


def tokenize(text: str, vocab: SubwordVocab, max_seq_len: int | None = None) -> TokenSequence:
    """Text to ids: pretokenize, greedy-cover each word, truncate to the first max_seq_len."""
    cap = vocab.max_seq_len if max_seq_len is None else max_seq_len
    ids = tokenize_words(pretokenize(text), vocab)
    return TokenSequence(tuple(ids[:cap]))


def subword_pieces(text: str, vocab: SubwordVocab) -> list[str]:
    """Surface strings of the produced tokens (OOV characters included verbatim)."""
    longest = max(vocab._longest, 1)
    return [p for w in pretokenize(text) for p in _segment(w, vocab._index, longest)]
