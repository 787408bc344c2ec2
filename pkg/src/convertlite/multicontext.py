"""Extra-context feature and the three-way multi-context objective."""
from __future__ import annotations

from dataclasses import dataclass, field

from . import numeric as nm
from .objective import ScoreConfig, batch_loss

MAX_EXTRA_CONTEXTS = 10


@dataclass
class MultiContextExample:
    immediate_context: str
    response: str
    extra_contexts: list = field(default_factory=list)  # oldest first

    def __post_init__(self):
        if len(self.extra_contexts) > MAX_EXTRA_CONTEXTS:
            self.extra_contexts = list(self.extra_contexts[-MAX_EXTRA_CONTEXTS:])


def build_extra_context(turns, mode: str = "pretrain", separator: str = " ") -> str:
    """Join earlier turns newest-first.

    ``turns`` arrive oldest -> newest; only the 10 most recent are kept. In
    ``"finetune"`` mode each turn is prefixed with its recency digit 0-9.
    """
    recent = list(turns)[-MAX_EXTRA_CONTEXTS:][::-1]
    if mode == "pretrain":
        return separator.join(recent)
    if mode == "finetune":
        return separator.join(f"{i}{separator}{t}" for i, t in enumerate(recent))
    raise ValueError(f"unknown extra-context mode {mode!r}")


def combine_contexts(h_x, h_z) -> nm.Tensor:
    """Mean of the immediate and extra-context encodings, re-normalised."""
    return nm.l2_normalize(nm.scale(nm.add(h_x, h_z), 0.5))


def multi_context_loss(h_x, h_z, h_y, step: int, cfg: ScoreConfig,
                       weights=(1.0, 1.0, 1.0)):
    """w1 L(h_x, h_y) + w2 L(h_z, h_y) + w3 L(mean(h_x, h_z), h_y).

    Returns (total loss tensor, {"immediate", "extra", "combined"} float diagnostics).
    """
    w1, w2, w3 = (float(w) for w in weights)
    with nm.precision("fp32"):
        h_xz = combine_contexts(h_x, h_z)
        parts = {
            "immediate": batch_loss(h_x, h_y, step, cfg),
            "extra": batch_loss(h_z, h_y, step, cfg),
            "combined": batch_loss(h_xz, h_y, step, cfg),
        }
        total = None
        for w, t in zip((w1, w2, w3), parts.values()):
            if w == 0.0:
                continue
            term = nm.scale(t, w)
            total = term if total is None else nm.add(total, term)
        if total is None:
            total = nm.scale(parts["immediate"], 0.0)
    return total, {k: float(v.data) for k, v in parts.items()}
