import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import tiny_config
from convertlite import numeric as nm
from convertlite import synthetic as syn
from convertlite.model import ConveRTModel
from convertlite.objective import (
    ScoreConfig, anneal_scale, batch_loss, rank_responses, row_losses, score, smoothed_targets,
)
from convertlite.tokenizer import VocabConfig, build_vocab
from convertlite.training import Corpus, CorpusRecord, TrainConfig, Trainer

CFG = ScoreConfig()


def unit_rows(rng, k, d=8):
    x = rng.standard_normal((k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_score_examples():
    h = np.zeros(512)
    h[0] = 1.0
    assert score(h, h, 0, CFG) == 1.0
    assert score(h, h, 10_000, CFG) == pytest.approx(math.sqrt(512))
    assert score(h, h, 50_000, CFG) == pytest.approx(22.627, abs=1e-3)
    assert anneal_scale(5_000, CFG) == pytest.approx((1 + math.sqrt(512)) / 2)
    assert anneal_scale(5_000, CFG) == pytest.approx(11.814, abs=1e-3)
    with pytest.raises(AssertionError):
        score(2 * h, h, 0, CFG)


@given(st.integers(0, 30_000), st.integers(0, 1000))
def test_score_bounded_by_scale(step, seed):
    a, b = unit_rows(np.random.default_rng(seed), 2, 512)
    c = anneal_scale(step, CFG)
    assert 1.0 <= c <= math.sqrt(512) + 1e-12
    assert abs(score(a, b, step, CFG)) <= c + 1e-9


def test_uniform_scores_give_log_k():
    h = np.tile(np.eye(4)[0], (2, 1))
    loss = batch_loss(h, h, 0, ScoreConfig(d=4, smoothing=0.0)).data
    assert float(loss) == pytest.approx(2 * math.log(2), abs=1e-6)
    assert float(loss) == pytest.approx(1.3863, abs=1e-4)


def test_smoothed_targets():
    t = smoothed_targets(4, 0.2)
    assert np.allclose(t[0], [0.8, 0.2 / 3, 0.2 / 3, 0.2 / 3])
    assert t[0, 1] == pytest.approx(0.0667, abs=1e-4)
    assert np.allclose(t.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        smoothed_targets(1, 0.2)
    with pytest.raises(ValueError):
        batch_loss(np.ones((1, 4)), np.ones((1, 4)), 0, CFG)


def test_confident_diagonal_has_positive_floor():
    k = 5
    s = np.zeros((k, k))
    np.fill_diagonal(s, 50.0)
    per_row = row_losses(s, 0.2)
    # oracle: -(0.8 * log p_ii + 0.05 * sum_j log p_ij), with p_ij = e^0 / (e^50 + 4)
    log_z = 50.0 + math.log1p(4 * math.exp(-50.0))
    want = -(0.8 * (50.0 - log_z) + 0.2 * (0.0 - log_z))
    assert np.allclose(per_row, want)
    assert want > 9.9  # 0.2 * 50 nats: smoothing never lets the loss reach 0
    assert np.all(row_losses(s, 0.0) < 1e-15)


@given(st.integers(2, 12), st.integers(0, 10_000), st.integers(0, 20_000),
       st.floats(0.0, 0.5))
def test_batch_loss_matches_numpy_oracle(k, seed, step, smoothing):
    rng = np.random.default_rng(seed)
    hx, hy = unit_rows(rng, k), unit_rows(rng, k)
    cfg = ScoreConfig(d=8, smoothing=smoothing)
    got = float(batch_loss(hx, hy, step, cfg).data)
    s = anneal_scale(step, cfg) * (hx @ hy.T)
    if smoothing == 0.0:  # the unsmoothed objective: -J
        j = np.trace(s) - sum(math.log(math.fsum(np.exp(row))) for row in s)
        assert got == pytest.approx(-j, rel=1e-5, abs=1e-5)
    assert got == pytest.approx(row_losses(s, smoothing).sum(), rel=1e-5, abs=1e-5)


@given(st.integers(2, 10), st.integers(0, 10_000))
def test_loss_invariant_to_row_permutation(k, seed):
    rng = np.random.default_rng(seed)
    hx, hy = unit_rows(rng, k), unit_rows(rng, k)
    perm = rng.permutation(k)
    a = float(batch_loss(hx, hy, 3000, ScoreConfig(d=8)).data)
    b = float(batch_loss(hx[perm], hy[perm], 3000, ScoreConfig(d=8)).data)
    assert a == pytest.approx(b, rel=1e-5)


def test_batch_loss_runs_in_fp32():
    rng = np.random.default_rng(0)
    hx, hy = unit_rows(rng, 4), unit_rows(rng, 4)
    with nm.precision("mixed"):
        mixed = batch_loss(hx, hy, 100, ScoreConfig(d=8)).data
    with nm.precision("fp32"):
        plain = batch_loss(hx, hy, 100, ScoreConfig(d=8)).data
    assert mixed == plain


def test_rank_responses_examples():
    h = np.array([1.0, 0.0])
    cands = np.array([[0.1, math.sqrt(1 - 0.01)], [0.9, math.sqrt(1 - 0.81)],
                      [0.5, math.sqrt(1 - 0.25)]])
    assert rank_responses(h, cands).tolist() == [1, 2, 0]
    cands = np.array([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])
    assert rank_responses(h, cands)[0] == 1
    cands = np.array([[0.6, 0.8], [0.6, 0.8], [0.0, 1.0]])
    assert rank_responses(h, cands).tolist() == [0, 1, 2]


@given(st.integers(1, 30), st.integers(0, 10_000), st.floats(1.0, 23.0))
def test_ranking_invariant_to_scale(n, seed, c):
    rng = np.random.default_rng(seed)
    h, cands = unit_rows(rng, 1)[0], unit_rows(rng, n)
    order = rank_responses(h, cands)
    assert sorted(order.tolist()) == list(range(n))
    assert np.array_equal(order, rank_responses(c * h, cands))
    sims = cands @ h
    assert np.all(np.diff(sims[order]) <= 1e-12)


@pytest.mark.slow
def test_loss_decreases_early_in_training():
    """100 steps on a learnable keyword task, averaged over 3 seeds."""
    records, _ = syn.keyword_pairs(n_pairs=800, n_keywords=40, n_fillers=30, seed=1)
    vocab = build_vocab(syn.corpus_lines(records), VocabConfig(min_frequency=3))
    corpus = Corpus.from_records([CorpusRecord(r.context, r.response) for r in records], vocab)
    curves = []
    for seed in range(3):
        model = ConveRTModel(tiny_config(vocab_size=vocab.size, oov_buckets=8), seed=seed,
                             vocab=vocab)
        cfg = TrainConfig(batch_size=32, lr_start=0.1, lr_end=0.01, max_steps=100,
                          anneal_steps=10_000, precision="fp32", seed=seed)
        curves.append([r["loss"] for r in Trainer(model, cfg, corpus).train()])
    mean = np.mean(curves, axis=0)
    windows = mean.reshape(5, 20).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows
    assert windows[0] - windows[-1] > 1.0  # scale stays near 1, so logits span only [-1, 1]
