import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from convertlite.intent import (
    IntentClassifier, IntentDataset, IntentError, classify, fit, train_intent_classifier,
)
from convertlite.model import ConveRTModel
from convertlite.tokenizer import SubwordVocab


def _separable(n=200, d=16, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    w = rng.standard_normal(d)
    x = rng.standard_normal((n, d)).astype(np.float32)
    x += np.outer(np.where(y == 1, 2.0, -2.0), w / np.linalg.norm(w)).astype(np.float32)
    return x, ["pos" if v else "neg" for v in y]


SMALL_GRID = dict(hidden_grid=(32,), dropout_grid=(0.0, 0.5), lr_grid=(0.03, 0.1))


@pytest.fixture(scope="module")
def toy_clf():
    x, y = _separable()
    return train_intent_classifier(x[:160], y[:160], x[160:180], y[160:180], **SMALL_GRID), x, y


def test_separable_toy_accuracy(toy_clf):
    clf, x, y = toy_clf
    assert clf.accuracy(x[180:], y[180:]) >= 0.95
    assert clf.hidden == 32 and clf.dropout in (0.0, 0.5)


def test_early_stopping_keeps_best_dev_weights():
    x, y = _separable(seed=1)
    clf = fit(x[:160], y[:160], x[160:], y[160:], ["neg", "pos"], hidden=16, lr=0.05,
              patience=5, max_epochs=200)
    accs = [h["dev_accuracy"] for h in clf.history]
    best = int(np.argmax(accs))
    assert len(accs) - 1 - best == 5  # halted exactly 5 epochs after the best one
    assert clf.accuracy(x[160:], y[160:]) == max(accs)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_probabilities_sum_to_one(toy_clf, seed):
    clf = toy_clf[0]
    feats = np.random.default_rng(seed).standard_normal(16) * 10
    label, p = classify(feats, clf)
    assert abs(p.sum() - 1.0) <= 1e-6
    assert label == clf.labels[int(np.argmax(p))]
    assert label in ("neg", "pos")


def test_rejects_single_class():
    x = np.zeros((4, 3), np.float32)
    with pytest.raises(IntentError):
        train_intent_classifier(x, ["a"] * 4, x, ["a"] * 4)
    with pytest.raises(IntentError):
        train_intent_classifier(x, ["a", "b"] * 2, x, ["c"] * 4)


def test_dataset_io_and_split(tmp_path):
    path = tmp_path / "i.jsonl"
    rows = [f'{{"text": "t{i}", "label": "{"ab"[i % 2]}"}}' for i in range(50)]
    path.write_text("\n".join(rows) + "\n")
    ds = IntentDataset.read(path)
    train, dev, test = ds.split(seed=0)
    # 25 per label: round(2.5) = 2 each for dev and test
    assert (len(train.texts), len(dev.texts), len(test.texts)) == (42, 4, 4)
    assert len(train.texts) + len(dev.texts) + len(test.texts) == 50
    for part in (train, dev, test):
        assert part.label_set == ["a", "b"]
    assert not set(train.texts) & set(test.texts)
    path.write_text('{"text": "x"}\n')
    with pytest.raises(IntentError):
        IntentDataset.read(path)


def test_save_load(tmp_path, toy_clf):
    clf, x, _ = toy_clf
    clf.save(tmp_path / "c.npz")
    again = IntentClassifier.load(tmp_path / "c.npz")
    assert np.array_equal(again.predict_proba(x[:5]), clf.predict_proba(x[:5]))


def _digest(model):
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(model.params[name].shadow.tobytes())
    return h.hexdigest()


def test_frozen_encoder_features_and_totality():
    vocab = SubwordVocab(list("abcdefghij"))
    model = ConveRTModel(tiny_config(vocab_size=vocab.size, oov_buckets=8), vocab, seed=0)
    texts = ["a b c", "a a b", "c b a", "h i j", "j j i", "i h g"] * 6
    labels = (["abc"] * 3 + ["hij"] * 3) * 6
    before = _digest(model)
    feats = model.encode_r_texts(texts)
    assert feats.shape == (36, model.cfg.reduced_dim)
    clf = train_intent_classifier(feats, labels, feats, labels, hidden_grid=(16,),
                                  dropout_grid=(0.0,), lr_grid=(0.1,))
    assert _digest(model) == before
    probe = model.encode_r_texts(["", "zzz", "a b c"])
    preds = clf.predict(probe)
    assert all(p in ("abc", "hij") for p in preds)
    assert preds[2] == "abc"
