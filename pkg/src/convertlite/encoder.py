"""Shared transformer tower: embeddings, two-matrix positions, windowed blocks, sqrt-N reduction."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import numeric as nm
from .numeric import Tensor

DEFAULT_CAPS = (3, 5, 48, 48, 48, 48)
ABLATIONS = ("A", "B", "C", "D", "E", "F")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    oov_buckets: int = 1000
    d_model: int = 512
    attn_dim: int = 64
    ff_dim: int = 2048
    n_layers: int = 6
    max_relative_attention: tuple = DEFAULT_CAPS
    max_seq_len: int = 60
    pos_sizes: tuple = (47, 11)
    n_heads: int = 1
    relative_bias: bool = True
    reduction_heads: int = 2
    head_hidden: int = 1024
    head_layers: int = 3
    head_skip: bool = True
    out_dim: int = 512
    multi_context: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        caps = tuple(int(c) for c in self.max_relative_attention)
        object.__setattr__(self, "max_relative_attention", caps)
        object.__setattr__(self, "pos_sizes", tuple(int(p) for p in self.pos_sizes))
        if len(caps) != self.n_layers:
            raise ValueError(
                f"{self.n_layers} layers need {self.n_layers} attention caps, got {len(caps)}"
            )
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def n_embeddings(self) -> int:
        return self.vocab_size + self.oov_buckets

    @property
    def reduced_dim(self) -> int:
        return self.reduction_heads * self.d_model

    @property
    def sides(self) -> tuple:
        return ("input", "response", "extra") if self.multi_context else ("input", "response")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_relative_attention"] = list(self.max_relative_attention)
        d["pos_sizes"] = list(self.pos_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def small_config(vocab_size: int, **overrides) -> ModelConfig:
    """Desk-scale shape used by the toy experiments: 6 blocks, 128-dim."""
    base = dict(
        vocab_size=vocab_size, d_model=128, attn_dim=32, ff_dim=256,
        head_hidden=256, out_dim=128,
    )
    base.update(overrides)
    return ModelConfig(**base)


def with_ablation(cfg: ModelConfig, letter: str) -> ModelConfig:
    """Toggle one ablation row: A multi-head, B no rel. bias, C flat caps,
    D one OOV bucket, E one reduction head, F no skips in the heads."""
    letter = letter.upper()
    if letter == "A":
        return replace(cfg, n_heads=8)
    if letter == "B":
        return replace(cfg, relative_bias=False)
    if letter == "C":
        top = max(cfg.max_relative_attention)
        return replace(cfg, max_relative_attention=(top,) * cfg.n_layers)
    if letter == "D":
        return replace(cfg, oov_buckets=1)
    if letter == "E":
        return replace(cfg, reduction_heads=1)
    if letter == "F":
        return replace(cfg, head_skip=False)
    raise ValueError(f"unknown ablation {letter!r}; expected one of {ABLATIONS}")


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    d = cfg.d_model
    qk = cfg.n_heads * cfg.attn_dim
    p = {
        "embed": (rng.standard_normal((cfg.n_embeddings, d)) / math.sqrt(d)).astype(nm.DTYPE),
        "pos1": (rng.standard_normal((cfg.pos_sizes[0], d)) / math.sqrt(d)).astype(nm.DTYPE),
        "pos2": (rng.standard_normal((cfg.pos_sizes[1], d)) / math.sqrt(d)).astype(nm.DTYPE),
    }
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        p[pre + "wq"] = nm.orthogonal_init((d, qk), rng)
        p[pre + "wk"] = nm.orthogonal_init((d, qk), rng)
        p[pre + "wv"] = nm.orthogonal_init((d, d), rng)
        p[pre + "wo"] = nm.orthogonal_init((d, d), rng)
        p[pre + "bo"] = np.zeros(d, nm.DTYPE)
        if cfg.relative_bias:
            p[pre + "rel_bias"] = np.zeros(2 * cfg.max_seq_len - 1, nm.DTYPE)
        p[pre + "ln1_g"] = np.ones(d, nm.DTYPE)
        p[pre + "ln1_b"] = np.zeros(d, nm.DTYPE)
        p[pre + "w1"] = nm.orthogonal_init((d, cfg.ff_dim), rng)
        p[pre + "b1"] = np.zeros(cfg.ff_dim, nm.DTYPE)
        p[pre + "w2"] = nm.orthogonal_init((cfg.ff_dim, d), rng)
        p[pre + "b2"] = np.zeros(d, nm.DTYPE)
        p[pre + "ln2_g"] = np.ones(d, nm.DTYPE)
        p[pre + "ln2_b"] = np.zeros(d, nm.DTYPE)
    p["reduce.w"] = nm.orthogonal_init((d, cfg.reduction_heads), rng)
    return p


def pad_batch(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with 0; returns (ids [B, L], lengths [B]) with L >= 1."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = max(int(lengths.max()) if len(seqs) else 0, 1)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = list(s.ids if hasattr(s, "ids") else s)
    return ids, lengths


def positional_indices(length: int, sizes=(47, 11)) -> tuple[np.ndarray, np.ndarray]:
    pos = np.arange(length)
    return pos % sizes[0], pos % sizes[1]


def embed_with_positions(params: dict, ids: np.ndarray, cfg: ModelConfig) -> Tensor:
    """E[id_i] + M1[i mod 47] + M2[i mod 11] for a padded [B, L] id batch."""
    i1, i2 = positional_indices(ids.shape[1], cfg.pos_sizes)
    pos = nm.add(nm.embedding(params["pos1"], i1), nm.embedding(params["pos2"], i2))
    return nm.add(nm.embedding(params["embed"], ids), pos)


def attention_allowed(length: int, cap: int, lengths: np.ndarray | None = None) -> np.ndarray:
    """Boolean [B or 1, 1, L, L]: |i-j| <= cap, key j not padding; the diagonal always."""
    off = np.arange(length)[None, :] - np.arange(length)[:, None]
    allowed = np.abs(off) <= cap
    if lengths is None:
        return allowed[None, None]
    valid = np.arange(length)[None, :] < lengths[:, None]
    allowed = allowed[None] & valid[:, None, :]
    allowed |= np.eye(length, dtype=bool)[None]
    return allowed[:, None]


def relative_index(length: int, max_len: int) -> np.ndarray:
    """Index into the bias vector for each (i, j): j - i + max_len - 1."""
    off = np.arange(length)[None, :] - np.arange(length)[:, None]
    return np.clip(off + max_len - 1, 0, 2 * max_len - 2)


def transformer_block(x: Tensor, layer: int, params: dict, cfg: ModelConfig,
                      lengths: np.ndarray | None = None, rng=None,
                      return_attention: bool = False):
    """Post-norm block: windowed single- (or multi-) head attention then feed-forward 1."""
    pre = f"block{layer}."
    B, L, d = x.shape
    H, a = cfg.n_heads, cfg.attn_dim
    dv = d // H

    def heads(t, width):
        return nm.transpose(nm.reshape(t, (B, L, H, width)), (0, 2, 1, 3))

    q = heads(nm.linear(x, params[pre + "wq"]), a)
    k = heads(nm.linear(x, params[pre + "wk"]), a)
    v = heads(nm.linear(x, params[pre + "wv"]), dv)
    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(a))
    if cfg.relative_bias:
        rel = nm.index(params[pre + "rel_bias"], relative_index(L, cfg.max_seq_len))
        scores = nm.add(scores, rel)
    allowed = attention_allowed(L, cfg.max_relative_attention[layer], lengths)
    probs = nm.softmax_masked(scores, allowed)
    att = nm.reshape(nm.transpose(nm.matmul(probs, v), (0, 2, 1, 3)), (B, L, d))
    att = nm.linear(att, params[pre + "wo"], params[pre + "bo"])
    att = nm.dropout(att, cfg.dropout, rng)
    x = nm.layer_norm(nm.add(x, att), params[pre + "ln1_g"], params[pre + "ln1_b"])
    hidden = nm.gelu_fast(nm.linear(x, params[pre + "w1"], params[pre + "b1"]))
    ff = nm.linear(hidden, params[pre + "w2"], params[pre + "b2"])
    out = nm.layer_norm(nm.add(x, ff), params[pre + "ln2_g"], params[pre + "ln2_b"])
    if return_attention:
        return out, probs
    return out


def reduction_weights(x: Tensor, params: dict, lengths: np.ndarray) -> Tensor:
    """Per-head softmax over real (non-padding) positions: [B, heads, L]."""
    B, L, _ = x.shape
    logits = nm.transpose(nm.linear(x, params["reduce.w"]), (0, 2, 1))
    valid = (np.arange(L)[None, :] < lengths[:, None])[:, None, :]
    return nm.softmax_masked(logits, valid)


def _sqrt_len(lengths: np.ndarray, dtype) -> np.ndarray:
    return np.sqrt(lengths.astype(np.float64)).astype(dtype)[:, None, None]


def reduce(x: Tensor, params: dict, lengths: np.ndarray) -> Tensor:
    """Fused sqrt-N reduction: weights applied to x by one matmul per head.

    Empty sequences reduce to the zero vector.
    """
    B, L, d = x.shape
    w = reduction_weights(x, params, lengths)
    pooled = nm.mul(nm.matmul(w, x), nm.Tensor(_sqrt_len(lengths, x.data.dtype)))
    return nm.reshape(pooled, (B, -1))


def reduce_unfused(x: Tensor, params: dict, lengths: np.ndarray) -> Tensor:
    """Reference path: build each head's weighted sequence, then sum it."""
    B, L, d = x.shape
    w = reduction_weights(x, params, lengths)
    heads = w.shape[1]
    weighted = nm.mul(nm.reshape(w, (B, heads, L, 1)), nm.reshape(x, (B, 1, L, d)))
    pooled = nm.mul(nm.sum(weighted, axis=2), nm.Tensor(_sqrt_len(lengths, x.data.dtype)))
    return nm.reshape(pooled, (B, -1))


def encode_r(params: dict, ids: np.ndarray, lengths: np.ndarray, cfg: ModelConfig,
             rng=None) -> Tensor:
    """Token batch -> reduced representation r [B, reduction_heads * d_model]."""
    x = embed_with_positions(params, ids, cfg)
    x = nm.dropout(x, cfg.dropout, rng)
    for layer in range(cfg.n_layers):
        x = transformer_block(x, layer, params, cfg, lengths, rng)
    return reduce(x, params, lengths)

