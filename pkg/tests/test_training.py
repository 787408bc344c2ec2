import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import tiny_config
from convertlite.model import ConveRTModel
from convertlite.serialization import load_model
from convertlite.tokenizer import SubwordVocab
from convertlite.training import (
    Adadelta, Corpus, CorpusRecord, IngestError, TrainConfig, Trainer, clip_by_norm,
    finetune_config, ingest, learning_rate, load_training_state, parse_record, state_path,
)

VOCAB = SubwordVocab(list("abcdefghijklmnopqrstuvwxyz"))


def _records(n, seed=0):
    rng = np.random.default_rng(seed)
    letters = list("abcdefghij")
    out = []
    for _ in range(n):
        c = " ".join(rng.choice(letters, 3))
        out.append(CorpusRecord(c, c[::-1], [" ".join(rng.choice(letters, 2))]))
    return out


def _model(seed=0, multi=False):
    cfg = tiny_config(vocab_size=VOCAB.size, oov_buckets=8, multi_context=multi)
    return ConveRTModel(cfg, VOCAB, seed=seed)


def test_learning_rate_endpoints():
    cfg = TrainConfig(max_steps=1000)
    assert learning_rate(0, cfg) == pytest.approx(1.0)
    assert learning_rate(1000, cfg) == pytest.approx(0.001)
    assert learning_rate(500, cfg) == pytest.approx((1.0 + 0.001) / 2)
    assert learning_rate(5000, cfg) == pytest.approx(0.001)
    ft = finetune_config(max_steps=10)
    assert (ft.batch_size, ft.lr_start, ft.lr_end, ft.dropout) == (256, 0.1, 0.0001, 0.2)
    assert learning_rate(10, ft) == pytest.approx(0.0001)


@given(st.integers(1, 10_000), st.integers(0, 10_000))
def test_learning_rate_monotone(max_steps, t):
    cfg = TrainConfig(max_steps=max_steps)
    a, b = learning_rate(t, cfg), learning_rate(t + 1, cfg)
    assert cfg.lr_end - 1e-12 <= b <= a <= cfg.lr_start + 1e-12


def test_adadelta_first_step():
    p = {"w": np.array([1.0, -2.0, 0.0])}
    g = {"w": np.array([3.0, -0.5, 0.0])}
    Adadelta(0.9, 1e-6).step(p, g, lr=1.0)
    # delta = sqrt(eps) / sqrt(0.1 g^2 + eps) * g ~ sqrt(1e-5) * sign(g)
    want = np.sqrt(1e-6) / np.sqrt(0.1 * np.array([9.0, 0.25, 0.0]) + 1e-6) * g["w"]
    assert np.allclose(p["w"], [1.0, -2.0, 0.0] - want)
    assert abs(1.0 - p["w"][0]) == pytest.approx(3.16e-3, rel=1e-3)
    assert p["w"][2] == 0.0


def test_adadelta_zero_gradient_is_noop():
    p = {"w": np.arange(4.0)}
    opt = Adadelta()
    for _ in range(3):
        opt.step(p, {"w": np.zeros(4)}, lr=1.0)
    assert np.array_equal(p["w"], np.arange(4.0))


def test_clip_by_norm():
    g = np.array([3.0, 4.0], np.float32)
    assert np.allclose(clip_by_norm(g, 1.0), [0.6, 0.8])
    assert np.array_equal(clip_by_norm(g * 0.1, 1.0), g * 0.1)


def test_parse_record_rejects_malformed():
    assert parse_record('{"context": "a", "response": "b"}') == CorpusRecord("a", "b", [])
    for bad in ('{"context": "a"}', "not json", "[1]", '{"context": 1, "response": "b"}',
                '{"context": "a", "response": "b", "extra_contexts": [1]}'):
        assert parse_record(bad) is None


def test_ingest_and_batching(tmp_path):
    path = tmp_path / "c.jsonl"
    lines = [json.dumps({"context": r.context, "response": r.response}) for r in _records(1024)]
    lines.append(json.dumps({"context": "orphan"}))
    path.write_text("\n".join(lines) + "\n")
    corpus = ingest(path, VOCAB)
    assert len(corpus) == 1024 and corpus.skipped == 1
    batches = list(corpus.batches(512, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [512, 512]
    multi = ingest(path, VOCAB, mode="multi")
    assert all(e.extra == () for e in multi.examples)
    with pytest.raises(IngestError):
        list(corpus.batches(2048, np.random.default_rng(0)))
    (tmp_path / "empty.jsonl").write_text('{"context": "x"}\n')
    with pytest.raises(IngestError):
        ingest(tmp_path / "empty.jsonl", VOCAB)


def test_multi_corpus_needs_multi_model():
    corpus = Corpus.from_records(_records(8), VOCAB, mode="multi")
    with pytest.raises(ValueError):
        Trainer(_model(), TrainConfig(batch_size=4), corpus)


def test_zero_steps_writes_untouched_checkpoint(tmp_path):
    m = _model()
    before = {n: a.copy() for n, a in m.shadows().items()}
    ckpt = tmp_path / "m.cvrt"
    corpus = Corpus.from_records(_records(16), VOCAB)
    Trainer(m, TrainConfig(batch_size=8, max_steps=0), corpus, checkpoint_path=ckpt).train()
    assert ckpt.exists()
    assert all(np.array_equal(before[n], a) for n, a in m.shadows().items())
    loaded = load_model(ckpt, VOCAB)
    assert np.array_equal(loaded.encode_texts(["abc"]), m.encode_texts(["abc"]))


def _train(tmp_path, name, steps, seed=0, resume_from=None, **kw):
    m = _model(seed=1)
    corpus = Corpus.from_records(_records(32), VOCAB)  # 2 batches of 16 per epoch
    cfg = TrainConfig(batch_size=16, max_steps=steps, seed=seed, lr_start=0.1, **kw)
    ckpt = tmp_path / name
    tr = Trainer(m, cfg, corpus, checkpoint_path=ckpt, log_path=tmp_path / f"{name}.log")
    if resume_from is not None:
        load_training_state(tr, state_path(resume_from))
    tr.train()
    return tr, ckpt


def test_training_is_deterministic(tmp_path):
    _, a = _train(tmp_path, "a.cvrt", 4)
    _, b = _train(tmp_path, "b.cvrt", 4)
    assert a.read_bytes() == b.read_bytes()
    _, c = _train(tmp_path, "c.cvrt", 4, seed=5)
    assert a.read_bytes() != c.read_bytes()
    log = [json.loads(x) for x in (tmp_path / "a.cvrt.log").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    assert {"loss", "lr", "scale", "losses"} <= set(log[0])


def test_resume_continues_the_run(tmp_path):
    straight, s_ckpt = _train(tmp_path, "s.cvrt", 6)
    # the same 6-step run, interrupted after two epochs (4 steps) and checkpointed
    m = _model(seed=1)
    corpus = Corpus.from_records(_records(32), VOCAB)
    half = tmp_path / "h.cvrt"
    tr = Trainer(m, TrainConfig(batch_size=16, max_steps=6, lr_start=0.1), corpus,
                 checkpoint_path=half)
    for _ in range(2):
        for batch in corpus.batches(16, tr.rng):
            tr.train_step(batch)
    tr._checkpoint()
    resumed, r_ckpt = _train(tmp_path, "r.cvrt", 6, resume_from=half)
    assert [r["step"] for r in resumed.history] == [4, 5]
    assert resumed.model.step == 6
    for n, p in straight.model.params.items():
        assert np.array_equal(p.shadow, resumed.model.params[n].shadow), n
    assert s_ckpt.read_bytes() == r_ckpt.read_bytes()


def test_dropout_only_when_configured():
    corpus = Corpus.from_records(_records(8), VOCAB)
    batch = corpus.examples[:4]
    for rate, same in ((0.0, True), (0.5, False)):
        tr = Trainer(_model(), TrainConfig(batch_size=4, dropout=rate, precision="fp32"), corpus)
        params = tr.model.render(False)
        a = float(tr.loss(params, batch)[0].data)
        b = float(tr.loss(params, batch)[0].data)
        assert (a == b) is same
        # evaluation never drops
        assert float(tr.loss(params, batch, train=False)[0].data) == \
            float(tr.loss(params, batch, train=False)[0].data)


@pytest.mark.parametrize("multi", [False, True])
def test_sharded_encoding_matches_single_pass(multi):
    corpus = Corpus.from_records(_records(12), VOCAB, mode="multi" if multi else "single")
    batch = corpus.examples
    losses = []
    for shards in (1, 3, 5):
        tr = Trainer(_model(multi=multi), TrainConfig(batch_size=12, num_shards=shards,
                                                      precision="fp32"), corpus)
        losses.append(float(tr.loss(tr.model.render(False), batch, train=False)[0].data))
    assert losses[1] == pytest.approx(losses[0], rel=1e-6)
    assert losses[2] == pytest.approx(losses[0], rel=1e-6)


def test_training_step_reduces_loss_on_fixed_batch():
    corpus = Corpus.from_records(_records(16), VOCAB)
    batch = corpus.examples
    tr = Trainer(_model(), TrainConfig(batch_size=16, lr_start=0.5, max_steps=40,
                                       precision="fp32", anneal_steps=1), corpus)
    first = tr.train_step(batch)["loss"]
    for _ in range(30):
        last = tr.train_step(batch)["loss"]
    assert last < first
    assert math.isfinite(last)


def test_corpus_must_fit_embedding_table():
    big = SubwordVocab(list("abcdefghijklmnopqrstuvwxyz"), oov_buckets=1000)
    corpus = Corpus.from_records([CorpusRecord("a ☃", "b"), CorpusRecord("c", "d")], big)
    with pytest.raises(ValueError, match="embedding rows"):
        Trainer(_model(), TrainConfig(batch_size=2), corpus)
