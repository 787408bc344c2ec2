"""Quantization-aware mixed precision: 8-bit embeddings, 16-bit casts, 32-bit shadows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import to_half

EMBEDDING_8BIT = "embedding-8bit"
PARAM_16BIT = "param-16bit"
ACTIVATION_16BIT = "activation-16bit"
STABLE_32BIT = "stable-32bit"

LOSS_SCALE = 128.0
MAX_CONSECUTIVE_SKIPS = 50
RANGE_UPDATE_PERIOD = 1000
LEVELS = 256


class DivergenceError(RuntimeError):
    """Raised when non-finite gradients persist beyond the skip budget."""


@dataclass(frozen=True)
class QuantRange:
    lo: float
    hi: float
    levels: int = LEVELS

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"quantization range needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.levels - 1)


def _margin(lo: float, hi: float) -> float:
    return max(0.1 * (hi - lo), 0.01)


def initial_range(values: np.ndarray) -> QuantRange:
    lo, hi = float(np.min(values)), float(np.max(values))
    m = _margin(lo, hi)
    return QuantRange(lo - m, hi + m)


def update_quant_range(current: QuantRange, lo_obs: float, hi_obs: float) -> QuantRange:
    """Keep the range if the observed span fits with full headroom, else rebuild it
    around the observation with max(10% of the span, 0.01) on either side."""
    m = _margin(lo_obs, hi_obs)
    if lo_obs - m >= current.lo and hi_obs + m <= current.hi:
        return current
    return QuantRange(lo_obs - m, hi_obs + m, current.levels)


def quantize(values: np.ndarray, qrange: QuantRange) -> tuple[np.ndarray, int]:
    """Map to uint8 codes with round-half-even; returns (codes, n_clamped)."""
    v = np.asarray(values, dtype=np.float64)
    pos = (v - qrange.lo) * (qrange.levels - 1) / (qrange.hi - qrange.lo)
    codes = np.rint(pos)
    clamped = int(np.count_nonzero((codes < 0) | (codes > qrange.levels - 1)))
    codes = np.clip(codes, 0, qrange.levels - 1).astype(np.uint8)
    return codes, clamped


def dequantize(codes: np.ndarray, qrange: QuantRange) -> np.ndarray:
    """lo + code * step, as a float32 carrier."""
    c = np.asarray(codes, dtype=np.float64)
    return (qrange.lo + c * qrange.step).astype(np.float32)


def fake_quantize(values: np.ndarray, qrange: QuantRange) -> tuple[np.ndarray, int]:
    codes, clamped = quantize(values, qrange)
    return dequantize(codes, qrange), clamped


@dataclass
class ShadowParam:
    """Float32 master copy plus the rendering used in computation."""

    shadow: np.ndarray
    precision_class: str = PARAM_16BIT

    def cast(self, qrange: QuantRange | None = None) -> np.ndarray:
        if self.precision_class == EMBEDDING_8BIT:
            if qrange is None:
                raise ValueError("8-bit parameters need a quantization range")
            return fake_quantize(self.shadow, qrange)[0]
        if self.precision_class == PARAM_16BIT:
            return to_half(self.shadow)
        return self.shadow


class LossScaler:
    """Fixed power-of-two loss scale with skip-on-overflow."""

    def __init__(self, scale: float = LOSS_SCALE, max_skips: int = MAX_CONSECUTIVE_SKIPS):
        self.scale = float(scale)
        self.max_skips = max_skips
        self.consecutive_skips = 0
        self.total_skips = 0

    def unscale(self, grads: dict) -> dict | None:
        """Divide every gradient by the scale; None means skip this step."""
        out = {}
        finite = True
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float32) / np.float32(self.scale)
            finite &= bool(np.all(np.isfinite(g)))
            out[name] = g
        if finite:
            self.consecutive_skips = 0
            return out
        self.consecutive_skips += 1
        self.total_skips += 1
        if self.consecutive_skips > self.max_skips:
            raise DivergenceError(
                f"non-finite gradients for {self.consecutive_skips} consecutive steps"
            )
        return None
