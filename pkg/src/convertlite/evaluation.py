"""Ranked-retrieval metrics (R_N@k, MRR) and evaluation-file handling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class EvalError(ValueError):
    pass


@dataclass
class EvalInstance:
    context: str
    candidates: list
    relevant_index: int
    extra_contexts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise EvalError("an evaluation instance needs at least 2 candidates")
        if not 0 <= self.relevant_index < len(self.candidates):
            raise EvalError(f"relevant_index {self.relevant_index} out of range")


def relevant_ranks(scores, relevant) -> np.ndarray:
    """1-based rank of each row's relevant column; ties favour the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevant, dtype=np.int64)
    target = s[np.arange(len(s)), rel][:, None]
    cols = np.arange(s.shape[1])[None, :]
    ahead = (s > target) | ((s == target) & (cols < rel[:, None]))
    return 1 + ahead.sum(axis=1)


def recall_from_scores(scores, relevant, k: int) -> float:
    return float(np.mean(relevant_ranks(scores, relevant) <= k))


def mrr_from_scores(scores, relevant) -> float:
    ranks = relevant_ranks(scores, relevant)
    return math.fsum(1.0 / ranks) / len(ranks)


def _check_pool_sizes(instances, n: int | None):
    sizes = {len(inst.candidates) for inst in instances}
    if n is None:
        if len(sizes) != 1:
            raise EvalError(f"instances have mixed candidate pool sizes {sorted(sizes)}")
        return sizes.pop()
    bad = [i for i, inst in enumerate(instances) if len(inst.candidates) != n]
    if bad:
        raise EvalError(f"instance {bad[0]} has {len(instances[bad[0]].candidates)} "
                        f"candidates, expected {n}")
    return n


def score_instances(instances, model, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cosine score matrix [instances, N] from any object exposing
    ``encode_context(texts, extra_contexts)`` and ``encode_response(texts)``."""
    if not instances:
        raise EvalError("no evaluation instances")
    n = _check_pool_sizes(instances, n)
    ctx = model.encode_context([i.context for i in instances],
                               [i.extra_contexts for i in instances])
    unique = {}
    for inst in instances:
        for c in inst.candidates:
            unique.setdefault(c, len(unique))
    resp = model.encode_response(list(unique))
    scores = np.empty((len(instances), n))
    for row, inst in enumerate(instances):
        cand = resp[[unique[c] for c in inst.candidates]]
        scores[row] = cand.astype(np.float64) @ ctx[row].astype(np.float64)
    relevant = np.array([i.relevant_index for i in instances])
    return scores, relevant


def recall_at_k(instances, model, n: int = 100, k: int = 1) -> float:
    scores, relevant = score_instances(instances, model, n)
    return recall_from_scores(scores, relevant, k)


def mrr(instances, model, n: int | None = None) -> float:
    scores, relevant = score_instances(instances, model, n)
    return mrr_from_scores(scores, relevant)


def build_instances(pairs, n: int, rng: np.random.Generator, groups=None) -> list:
    """Pair each (context, response[, extra_contexts]) with N-1 distractor responses
    drawn without replacement from the other pairs. Pairs sharing a group label
    are never used as each other's distractors."""
    responses = [p[1] for p in pairs]
    if len(pairs) < n:
        raise EvalError(f"need at least {n} pairs to build pools of {n}")
    groups = list(groups) if groups is not None else list(range(len(pairs)))
    out = []
    for i, p in enumerate(pairs):
        others = [j for j in range(len(pairs)) if groups[j] != groups[i]]
        if len(others) < n - 1:
            raise EvalError("not enough distinct distractors to fill the pool")
        picks = rng.choice(others, size=n - 1, replace=False)
        cands = [responses[j] for j in picks]
        pos = int(rng.integers(n))
        cands.insert(pos, responses[i])
        extra = list(p[2]) if len(p) > 2 and p[2] else []
        out.append(EvalInstance(p[0], cands, pos, extra))
    return out


def read_eval_file(path) -> list:
    instances = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                instances.append(EvalInstance(
                    obj["context"], list(obj["candidates"]), int(obj["relevant_index"]),
                    list(obj.get("extra_contexts") or []),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EvalError(f"{path}:{lineno}: malformed eval record ({exc})") from None
    if not instances:
        raise EvalError(f"{path}: no evaluation instances")
    return instances


def write_eval_file(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            obj = {"context": inst.context, "candidates": inst.candidates,
                   "relevant_index": inst.relevant_index}
            if inst.extra_contexts:
                obj["extra_contexts"] = inst.extra_contexts
            f.write(json.dumps(obj) + "\n")


class CopyEncoder:
    """Debug encoder: each distinct text gets a fixed pseudo-random unit vector,
    so a context ranks an identical candidate first."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _vec(self, text: str) -> np.ndarray:
        from .tokenizer import fnv1a64

        rng = np.random.default_rng(fnv1a64(text.encode("utf-8")))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def encode_response(self, texts):
        return np.stack([self._vec(t) for t in texts]) if texts else np.zeros((0, self.dim))

    def encode_context(self, texts, extra_contexts=None):
        return self.encode_response(list(texts))
