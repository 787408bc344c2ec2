import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import tiny_config
from convertlite import numeric as nm
from convertlite.model import ConveRTModel
from convertlite.training import Corpus, Example, TrainConfig, Trainer


def t(x, grad=False):
    return nm.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- forward examples -----------------------------------------------------------------


def test_gelu_fast_values():
    out = nm.gelu_fast(t([0.0, 1.0, 10.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(1.0 / (1.0 + math.exp(-1.702)), abs=1e-12)
    assert out[1] == pytest.approx(0.8458, abs=1e-4)
    assert abs(out[2] - 10.0) < 1e-6


def test_layer_norm_examples():
    ones, zeros = np.ones(4), np.zeros(4)
    assert np.allclose(nm.layer_norm(t(np.full(4, 3.0)), t(ones), t(zeros)).data, 0.0)
    y = nm.layer_norm(t([1.0, -1.0]), t([1.0, 1.0]), t([0.0, 0.0])).data
    assert np.allclose(y, np.array([1.0, -1.0]) / math.sqrt(1.0 + nm.LN_EPS), atol=1e-12)


@given(hnp.arrays(np.float64, st.integers(2, 16),
                  elements=st.floats(-100, 100, allow_nan=False)))
def test_layer_norm_standardises(x):
    if np.var(x) < 1e-3:
        return
    y = nm.layer_norm(t(x), t(np.ones_like(x)), t(np.zeros_like(x))).data
    assert abs(y.mean()) < 1e-6
    assert abs(y.var() - np.var(x) / (np.var(x) + nm.LN_EPS)) < 1e-6


def test_l2_normalize_examples():
    assert np.allclose(nm.l2_normalize(t([3.0, 4.0])).data, [0.6, 0.8])
    u = np.array([0.6, 0.8])
    assert np.allclose(nm.l2_normalize(t(u)).data, u)
    z = nm.l2_normalize(t(np.zeros(5))).data
    assert np.all(z == 0) and not np.any(np.isnan(z))


def test_softmax_examples():
    assert np.allclose(nm.softmax_np(np.zeros(3)), [1 / 3] * 3)
    assert np.array_equal(nm.softmax_np(np.array([5.0, 0.0]), np.array([True, False])), [1, 0])
    p = nm.softmax_np(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(p, [0.0900, 0.2447, 0.6652], atol=1e-4)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                  elements=st.floats(-50, 50, allow_nan=False)),
       st.data())
def test_softmax_rows_and_mask(scores, data):
    mask = data.draw(hnp.arrays(bool, scores.shape))
    mask[:, 0] = True
    p = nm.softmax_np(scores, mask)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[~mask] == 0.0)


def test_orthogonal_init():
    rng = np.random.default_rng(3)
    w = nm.orthogonal_init((4, 4), rng).astype(np.float64)
    assert np.allclose(w @ w.T, np.eye(4), atol=1e-5)
    w = nm.orthogonal_init((2, 8), rng).astype(np.float64)
    assert np.allclose(w @ w.T, np.eye(2), atol=1e-5)
    a = nm.orthogonal_init((5, 3), np.random.default_rng(9))
    b = nm.orthogonal_init((5, 3), np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_embedding_rejects_out_of_range():
    with pytest.raises(IndexError):
        nm.embedding(t(np.zeros((3, 2))), np.array([3]))


# --- half precision -------------------------------------------------------------------


def test_to_half_matches_numpy_cast():
    rng = np.random.default_rng(0)
    x = np.concatenate([
        rng.standard_normal(20000).astype(np.float32) * 10.0 ** rng.integers(-9, 6, 20000),
        np.array([0.0, -0.0, 65504.0, 65519.0, 65520.0, -70000.0, np.inf, -np.inf,
                  6.1e-5, 5.96e-8, 2.9e-8, 3.0e-8, 1e-7], np.float32),
    ]).astype(np.float32)
    with np.errstate(over="ignore"):
        want = x.astype(np.float16).astype(np.float32)
    got = nm.to_half(x)
    assert np.array_equal(got.view(np.uint32), want.view(np.uint32))
    assert np.isnan(nm.to_half(np.array([np.nan], np.float32))[0])


def test_precision_policy_norm_ops_compute_in_fp32():
    rng = np.random.default_rng(1)
    x32 = rng.standard_normal((3, 16)).astype(np.float32)
    x16 = x32.astype(np.float16)
    g, b = np.ones(16, np.float32), np.zeros(16, np.float32)
    with nm.precision("mixed"):
        outs = []
        for src in (x16.astype(np.float32), nm.to_half(x32)):
            outs.append((nm.layer_norm(nm.Tensor(src), g, b).data,
                         nm.l2_normalize(nm.Tensor(src)).data,
                         nm.softmax_masked(nm.Tensor(src)).data))
        mixed_ln = outs[0][0]
    for a, c in zip(*outs):
        assert a.dtype == np.float32
        assert np.array_equal(a, c)
    with nm.precision("fp32"):
        ref = nm.layer_norm(nm.Tensor(x16.astype(np.float32)), g, b).data
    assert np.array_equal(mixed_ln, ref)  # not rounded to 16 bits on the way out


def test_mixed_mode_rounds_ordinary_ops():
    a = np.array([1.0 + 2 ** -12], np.float32)
    with nm.precision("mixed"):
        out = nm.add(nm.Tensor(a), nm.Tensor(np.zeros(1, np.float32))).data
    assert out[0] == 1.0
    with nm.precision("fp32"):
        assert nm.add(nm.Tensor(a), nm.Tensor(np.zeros(1, np.float32))).data[0] != 1.0


# --- gradients: elementwise central differences in float64 ----------------------------


def _check_grad(fn, *inputs, h=1e-6, tol=1e-6):
    """fn maps Tensors to a scalar Tensor; compares every input element."""
    ts = [t(x, grad=True) for x in inputs]
    fn(*ts).backward()
    for k, x in enumerate(inputs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            args_p = [t(v) for v in inputs]
            args_m = [t(v) for v in inputs]
            args_p[k], args_m[k] = t(xp), t(xm)
            num[idx] = (float(fn(*args_p).data) - float(fn(*args_m).data)) / (2 * h)
        got = ts[k].grad
        scale = max(1.0, float(np.max(np.abs(num))))
        assert np.max(np.abs(got - num)) / scale < tol, (k, got, num)


R = np.random.default_rng(42)
W = R.standard_normal((4, 3))


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: nm.sum(nm.mul(nm.add(a, b), nm.Tensor(W))), [(4, 3), (3,)]),
    ("mul", lambda a, b: nm.sum(nm.mul(a, b)), [(4, 3), (4, 3)]),
    ("matmul", lambda a, b: nm.sum(nm.mul(nm.matmul(a, b), nm.matmul(a, b))), [(2, 4), (4, 3)]),
    ("linear", lambda x, w, b: nm.sum(nm.gelu_fast(nm.linear(x, w, b))), [(5, 4), (4, 3), (3,)]),
    ("gelu", lambda x: nm.sum(nm.mul(nm.gelu_fast(x), nm.Tensor(W))), [(4, 3)]),
    ("layer_norm", lambda x, g, b: nm.sum(nm.mul(nm.layer_norm(x, g, b), nm.Tensor(W))),
     [(4, 3), (3,), (3,)]),
    ("l2_normalize", lambda x: nm.sum(nm.mul(nm.l2_normalize(x), nm.Tensor(W))), [(4, 3)]),
    ("softmax_masked",
     lambda x: nm.sum(nm.mul(nm.softmax_masked(x, np.array([True, False, True])), nm.Tensor(W))),
     [(4, 3)]),
    ("soft_cross_entropy",
     lambda x: nm.soft_cross_entropy(x, np.full((4, 3), 1 / 3)), [(4, 3)]),
    ("transpose_reshape",
     lambda x: nm.sum(nm.mul(nm.reshape(nm.transpose(x, (1, 0)), (4, 3)), nm.Tensor(W))),
     [(4, 3)]),
    ("index", lambda x: nm.sum(nm.mul(nm.index(x, np.array([0, 2, 2, 1])), nm.Tensor(W))),
     [(3, 3)]),
    ("concat", lambda a, b: nm.sum(nm.mul(nm.concat([a, b], axis=0), nm.Tensor(W))),
     [(1, 3), (3, 3)]),
    ("mean", lambda x: nm.mul(nm.mean(x), nm.mean(x)), [(4, 3)]),
])
def test_op_gradients(name, fn, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    _check_grad(fn, *[rng.standard_normal(s) for s in shapes])


def test_embedding_gradient_accumulates_repeats():
    table = t(np.zeros((3, 2)), grad=True)
    nm.sum(nm.embedding(table, np.array([[0, 0, 2]]))).backward()
    assert np.array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_whole_model_gradient_float64_elementwise():
    """2-block, 16-dim tower, batch 4: every sampled element of every tensor."""
    cfg = tiny_config(d_model=16, attn_dim=8, ff_dim=32, head_hidden=32, out_dim=16)
    model = ConveRTModel(cfg, seed=2)
    rng = np.random.default_rng(5)
    batch = [Example(tuple(rng.integers(0, cfg.n_embeddings, rng.integers(1, 7))),
                     tuple(rng.integers(0, cfg.n_embeddings, rng.integers(1, 7))))
             for _ in range(4)]
    trainer = Trainer(model, TrainConfig(precision="fp32", batch_size=4, anneal_steps=10),
                      Corpus(batch))
    model.step = 4
    base = {n: p.shadow.astype(np.float64) for n, p in model.params.items()}
    params = {n: nm.Tensor(a.copy(), requires_grad=True) for n, a in base.items()}
    trainer.loss(params, batch, train=False)[0].backward()

    def f(arrays):
        return float(trainer.loss({n: nm.Tensor(a) for n, a in arrays.items()}, batch,
                                  train=False)[0].data)

    h = 1e-5
    for name, a in base.items():
        grad = params[name].grad
        flat = np.flatnonzero(np.ones(a.size))
        if name == "embed":  # only rows that occur in the batch get gradient
            used = sorted({i for e in batch for i in e.context + e.response})
            flat = np.concatenate([np.arange(i * a.shape[1], (i + 1) * a.shape[1]) for i in used])
        picks = rng.choice(flat, size=min(6, flat.size), replace=False)
        for p in picks:
            idx = np.unravel_index(p, a.shape)
            plus, minus = dict(base), dict(base)
            plus[name], minus[name] = a.copy(), a.copy()
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (f(plus) - f(minus)) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-6 + 1e-5 * abs(fd), (name, idx, fd, grad[idx])
