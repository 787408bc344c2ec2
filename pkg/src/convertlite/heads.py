"""Side-specific "feed-forward 2" projection heads: r -> unit-norm h."""
from __future__ import annotations

import numpy as np

from . import numeric as nm
from .encoder import ModelConfig


def init_head_params(cfg: ModelConfig, side: str, rng: np.random.Generator) -> dict:
    p = {}
    width_in = cfg.reduced_dim
    for i in range(cfg.head_layers):
        pre = f"head.{side}.{i}."
        p[pre + "w"] = nm.orthogonal_init((width_in, cfg.head_hidden), rng)
        p[pre + "b"] = np.zeros(cfg.head_hidden, nm.DTYPE)
        p[pre + "ln_g"] = np.ones(cfg.head_hidden, nm.DTYPE)
        p[pre + "ln_b"] = np.zeros(cfg.head_hidden, nm.DTYPE)
        width_in = cfg.head_hidden
    p[f"head.{side}.out.w"] = nm.orthogonal_init((width_in, cfg.out_dim), rng)
    p[f"head.{side}.out.b"] = np.zeros(cfg.out_dim, nm.DTYPE)
    return p


def project(params: dict, r, side: str, cfg: ModelConfig) -> nm.Tensor:
    """h = l2_normalize(W_out . stack(r)) where each hidden layer is
    LayerNorm(x + gelu(W x + b)); the skip is dropped when widths differ
    or when ``cfg.head_skip`` is off."""
    x = nm.as_tensor(r)
    for i in range(cfg.head_layers):
        pre = f"head.{side}.{i}."
        z = nm.gelu_fast(nm.linear(x, params[pre + "w"], params[pre + "b"]))
        if cfg.head_skip and x.shape[-1] == z.shape[-1]:
            z = nm.add(x, z)
        x = nm.layer_norm(z, params[pre + "ln_g"], params[pre + "ln_b"])
    out = nm.linear(x, params[f"head.{side}.out.w"], params[f"head.{side}.out.b"])
    return nm.l2_normalize(out)
