"""Quantized on-disk model format.

Layout (little-endian)::

    b"CVRT" | u32 version | 32-byte vocab digest | u32 n | n bytes JSON config
    u32 tensor count, then per tensor:
        u16 name length | name | u8 class | u8 ndim | u32 * ndim shape
        class 0 (8-bit embedding): f64 lo | f64 hi | uint8 codes
        class 1 (16-bit parameter): binary16 values
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig
from .model import ConveRTModel
from .numeric import to_half
from .quantization import EMBEDDING_8BIT, PARAM_16BIT, QuantRange, quantize
from .tokenizer import SubwordVocab

MAGIC = b"CVRT"
VERSION = 1
_CLASS_CODE = {EMBEDDING_8BIT: 0, PARAM_16BIT: 1}
_CODE_CLASS = {v: k for k, v in _CLASS_CODE.items()}


class ModelFileError(ValueError):
    pass


@dataclass
class ModelFileInfo:
    version: int
    vocab_digest: bytes
    config: dict
    header_bytes: int
    tensors: list  # (name, class, shape, data_bytes)
    total_bytes: int

    @property
    def embedding_params(self) -> int:
        return sum(int(np.prod(s)) for _, c, s, _ in self.tensors if c == EMBEDDING_8BIT)

    @property
    def network_params(self) -> int:
        return sum(int(np.prod(s)) for _, c, s, _ in self.tensors if c == PARAM_16BIT)

    @property
    def embedding_bytes(self) -> int:
        return sum(b for _, c, _, b in self.tensors if c == EMBEDDING_8BIT)

    @property
    def network_bytes(self) -> int:
        return sum(b for _, c, _, b in self.tensors if c == PARAM_16BIT)

    @property
    def metadata_bytes(self) -> int:
        return self.total_bytes - self.embedding_bytes - self.network_bytes

    @property
    def multi_context(self) -> bool:
        return bool(self.config["model"].get("multi_context", False))


def _vocab_digest(vocab: SubwordVocab | None) -> bytes:
    return vocab.digest() if vocab is not None else bytes(32)


def dumps_model(model: ConveRTModel) -> bytes:
    buf = io.BytesIO()
    meta = {
        "model": model.cfg.to_dict(),
        "step": int(model.step),
        "extra_context_mode": model.extra_context_mode,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_vocab_digest(model.vocab))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        shape = p.shadow.shape
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CLASS_CODE[p.precision_class], len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        if p.precision_class == EMBEDDING_8BIT:
            codes, _ = quantize(p.shadow, model.qrange)
            buf.write(struct.pack("<dd", model.qrange.lo, model.qrange.hi))
            buf.write(codes.tobytes())
        else:
            buf.write(to_half(p.shadow).astype("<f2").tobytes())
    return buf.getvalue()


def save_model(model: ConveRTModel, path) -> int:
    """Write the quantized rendering of ``model``; returns bytes written."""
    data = dumps_model(model)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFileError("model file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(data: bytes, want_arrays: bool):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version} (expected {VERSION})")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt config block: {exc}") from None
    (count,) = r.unpack("<I")
    header_end = r.pos
    tensors, arrays, qrange = [], {}, None
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_CLASS:
            raise ModelFileError(f"unknown precision class {code} for {name}")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        cls = _CODE_CLASS[code]
        if cls == EMBEDDING_8BIT:
            lo, hi = r.unpack("<dd")
            raw = r.take(size)
            qrange = QuantRange(lo, hi)
            if want_arrays:
                codes = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
                arrays[name] = (lo + codes.astype(np.float64) * qrange.step).astype(np.float32)
            tensors.append((name, cls, shape, size))
        else:
            raw = r.take(2 * size)
            if want_arrays:
                arrays[name] = np.frombuffer(raw, dtype="<f2").astype(np.float32).reshape(shape)
            tensors.append((name, cls, shape, 2 * size))
    if r.pos != len(data):
        raise ModelFileError("trailing bytes after last tensor record")
    info = ModelFileInfo(version, digest, meta, header_end, tensors, len(data))
    return info, arrays, qrange


def inspect_model(path) -> ModelFileInfo:
    with open(path, "rb") as f:
        return _parse(f.read(), want_arrays=False)[0]


def load_model(path, vocab: SubwordVocab | None = None,
               expect_multi_context: bool | None = None) -> ConveRTModel:
    """Rebuild a frozen inference model whose quantized rendering matches the saved one."""
    with open(path, "rb") as f:
        data = f.read()
    info, arrays, qrange = _parse(data, want_arrays=True)
    cfg = ModelConfig.from_dict(info.config["model"])
    if vocab is not None:
        if vocab.oov_buckets != cfg.oov_buckets:
            vocab = vocab.with_oov_buckets(cfg.oov_buckets)
        if info.vocab_digest != vocab.digest():
            raise ModelFileError(
                "vocabulary digest mismatch: model was trained with another vocab")
    if expect_multi_context is not None and info.multi_context != expect_multi_context:
        want = "multi-context" if expect_multi_context else "single-context"
        have = "multi-context" if info.multi_context else "single-context"
        raise ModelFileError(f"expected a {want} model, file holds a {have} model")
    model = ConveRTModel(cfg, vocab, extra_context_mode=info.config.get("extra_context_mode",
                                                                        "pretrain"))
    model.load_arrays(arrays, qrange)
    model.step = int(info.config.get("step", 0))
    return model
