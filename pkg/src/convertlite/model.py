"""The dual encoder: shared tower, side-specific heads, shadow parameters."""
from __future__ import annotations

import numpy as np

from . import numeric as nm
from .encoder import ModelConfig, encode_r, init_encoder_params, pad_batch
from .heads import init_head_params, project
from .multicontext import build_extra_context, combine_contexts
from .quantization import (
    EMBEDDING_8BIT, PARAM_16BIT, QuantRange, ShadowParam, fake_quantize, initial_range,
)
from .tokenizer import SubwordVocab, TokenSequence, tokenize

ENCODE_CHUNK = 256


class ConveRTModel:
    """Holds float32 shadows for every tensor and renders them for compute.

    ``render(quantized=True)`` yields the quantization-aware view (8-bit
    embedding table, binary16 everything else); ``quantized=False`` the raw
    float32 shadows.
    """

    def __init__(self, cfg: ModelConfig, vocab: SubwordVocab | None = None, seed: int = 0,
                 extra_context_mode: str = "pretrain"):
        if vocab is not None and vocab.size != cfg.vocab_size:
            raise ValueError(f"config expects {cfg.vocab_size} subwords, vocab has {vocab.size}")
        if vocab is not None and vocab.oov_buckets != cfg.oov_buckets:
            vocab = vocab.with_oov_buckets(cfg.oov_buckets)
        self.cfg = cfg
        self.vocab = vocab
        self.step = 0
        self.extra_context_mode = extra_context_mode
        rng = np.random.default_rng(seed)
        arrays = init_encoder_params(cfg, rng)
        for side in cfg.sides:
            arrays.update(init_head_params(cfg, side, rng))
        self.params = {
            name: ShadowParam(a, EMBEDDING_8BIT if name == "embed" else PARAM_16BIT)
            for name, a in arrays.items()
        }
        self.qrange = initial_range(self.params["embed"].shadow)
        self.clamped = 0

    # parameter bookkeeping
    def names(self) -> list:
        return list(self.params)

    def shadows(self) -> dict:
        return {n: p.shadow for n, p in self.params.items()}

    def count(self, precision_class: str | None = None) -> int:
        return sum(p.shadow.size for p in self.params.values()
                   if precision_class is None or p.precision_class == precision_class)

    def render_arrays(self, quantized: bool = True) -> dict:
        out = {}
        for name, p in self.params.items():
            if not quantized:
                out[name] = p.shadow
            elif p.precision_class == EMBEDDING_8BIT:
                out[name], self.clamped = fake_quantize(p.shadow, self.qrange)
            else:
                out[name] = p.cast()
        return out

    def render(self, quantized: bool = True, requires_grad: bool = False) -> dict:
        return {n: nm.Tensor(a, requires_grad=requires_grad, name=n)
                for n, a in self.render_arrays(quantized).items()}

    # text handling
    def tokenize(self, text: str) -> TokenSequence:
        if self.vocab is None:
            raise ValueError("model has no vocabulary attached")
        return tokenize(text, self.vocab, self.cfg.max_seq_len)

    def extra_context_text(self, turns) -> str:
        return build_extra_context(turns or [], self.extra_context_mode)

    # encoding
    def _chunks(self, seqs, fn, params):
        outs = []
        for start in range(0, len(seqs), ENCODE_CHUNK):
            ids, lengths = pad_batch(seqs[start:start + ENCODE_CHUNK])
            outs.append(fn(params, ids, lengths).data)
        if not outs:
            return np.zeros((0, 0), np.float32)
        return np.concatenate(outs, axis=0)

    def _mode(self, quantized: bool) -> str:
        return "mixed" if quantized else "fp32"

    def encode_r_seqs(self, seqs, quantized: bool = True, params=None) -> np.ndarray:
        params = params or self.render(quantized)
        with nm.precision(self._mode(quantized)):
            return self._chunks(
                list(seqs), lambda p, i, l: encode_r(p, i, l, self.cfg), params
            ).reshape(len(seqs), self.cfg.reduced_dim)

    def encode_h_seqs(self, seqs, side: str, quantized: bool = True, params=None) -> np.ndarray:
        if side not in self.cfg.sides:
            raise ValueError(f"model has no {side!r} head (sides: {self.cfg.sides})")
        params = params or self.render(quantized)

        def fn(p, ids, lengths):
            return project(p, encode_r(p, ids, lengths, self.cfg), side, self.cfg)

        with nm.precision(self._mode(quantized)):
            return self._chunks(list(seqs), fn, params).reshape(len(seqs), self.cfg.out_dim)

    def encode_r_texts(self, texts, quantized: bool = True) -> np.ndarray:
        return self.encode_r_seqs([self.tokenize(t) for t in texts], quantized)

    def encode_texts(self, texts, side: str = "input", quantized: bool = True) -> np.ndarray:
        return self.encode_h_seqs([self.tokenize(t) for t in texts], side, quantized)

    def encode_response(self, texts, quantized: bool = True) -> np.ndarray:
        return self.encode_texts(texts, "response", quantized)

    def encode_context(self, texts, extra_contexts=None, quantized: bool = True) -> np.ndarray:
        """Context encodings used for ranking; mean of h_x and h_z for multi-context models."""
        h_x = self.encode_texts(texts, "input", quantized)
        if not self.cfg.multi_context:
            return h_x
        extra = extra_contexts or [[] for _ in texts]
        h_z = self.encode_texts([self.extra_context_text(t) for t in extra], "extra", quantized)
        with nm.precision("fp32"):
            return combine_contexts(nm.Tensor(h_x), nm.Tensor(h_z)).data

    def load_arrays(self, arrays: dict, qrange: QuantRange | None = None) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for name, a in arrays.items():
            if name not in self.params:
                raise KeyError(f"unexpected tensor {name!r}")
            if a.shape != self.params[name].shadow.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape}")
            self.params[name].shadow = np.array(a, dtype=np.float32)
        if qrange is not None:
            self.qrange = qrange
