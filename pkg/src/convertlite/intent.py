"""Intent classification on top of frozen r_x encodings."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm

log = logging.getLogger(__name__)

HIDDEN_GRID = (256, 512)
DROPOUT_GRID = (0.0, 0.5, 0.75)
LR_GRID = (0.01, 0.03, 0.1)


class IntentError(ValueError):
    pass


@dataclass
class IntentDataset:
    texts: list
    labels: list

    def __post_init__(self):
        if len(self.texts) != len(self.labels):
            raise IntentError("texts and labels differ in length")

    @property
    def label_set(self) -> list:
        return sorted(set(self.labels))

    @classmethod
    def read(cls, path) -> "IntentDataset":
        texts, labels = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    texts.append(str(obj["text"]))
                    labels.append(str(obj["label"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise IntentError(f"{path}:{lineno}: malformed intent record ({exc})") from None
        return cls(texts, labels)

    def split(self, seed: int = 0, fractions=(0.8, 0.1, 0.1)):
        """Stratified train/dev/test split; every label with >= 3 examples lands in all three."""
        rng = np.random.default_rng(seed)
        parts = ([], [], [])
        by_label = {}
        for i, y in enumerate(self.labels):
            by_label.setdefault(y, []).append(i)
        for y in sorted(by_label):
            idx = rng.permutation(by_label[y])
            n = len(idx)
            n_dev = max(1, int(round(fractions[1] * n))) if n >= 3 else 0
            n_test = max(1, int(round(fractions[2] * n))) if n >= 3 else 0
            n_train = n - n_dev - n_test
            parts[0].extend(idx[:n_train])
            parts[1].extend(idx[n_train:n_train + n_dev])
            parts[2].extend(idx[n_train + n_dev:])
        return tuple(
            IntentDataset([self.texts[i] for i in sorted(p)], [self.labels[i] for i in sorted(p)])
            for p in parts
        )


@dataclass
class IntentClassifier:
    """Two-layer feed-forward net: standardise -> affine -> gelu -> dropout -> affine."""

    labels: list
    mean: np.ndarray
    std: np.ndarray
    weights: dict
    hidden: int
    dropout: float
    lr: float
    history: list = field(default_factory=list)

    def logits(self, features: np.ndarray, rng=None) -> nm.Tensor:
        x = nm.Tensor(((features - self.mean) / self.std).astype(np.float32))
        w = {k: v if isinstance(v, nm.Tensor) else nm.Tensor(v) for k, v in self.weights.items()}
        h = nm.gelu_fast(nm.linear(x, w["w1"], w["b1"]))
        h = nm.dropout(h, self.dropout, rng)
        return nm.linear(h, w["w2"], w["b2"])

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(np.atleast_2d(features)).data
        return np.exp(nm.log_softmax_np(z))

    def predict(self, features: np.ndarray) -> list:
        p = self.predict_proba(features)
        return [self.labels[i] for i in np.argmax(p, axis=1)]

    def accuracy(self, features: np.ndarray, labels) -> float:
        return float(np.mean(np.array(self.predict(features)) == np.array(labels)))

    def save(self, path) -> None:
        arrays = {f"w.{k}": np.asarray(v) for k, v in self.weights.items()}
        meta = {"labels": self.labels, "hidden": self.hidden, "dropout": self.dropout,
                "lr": self.lr}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, mean=self.mean, std=self.std, **arrays)

    @classmethod
    def load(cls, path) -> "IntentClassifier":
        with np.load(path) as d:
            meta = json.loads(bytes(d["meta"]).decode("utf-8"))
            weights = {k[2:]: d[k] for k in d.files if k.startswith("w.")}
            return cls(meta["labels"], d["mean"], d["std"], weights, meta["hidden"],
                       meta["dropout"], meta["lr"])


def _init_weights(n_in, hidden, n_out, rng):
    return {
        "w1": nm.orthogonal_init((n_in, hidden), rng),
        "b1": np.zeros(hidden, np.float32),
        "w2": (rng.standard_normal((hidden, n_out)) * 0.01).astype(np.float32),
        "b2": np.zeros(n_out, np.float32),
    }


def fit(train_x, train_y, dev_x, dev_y, labels, hidden=256, dropout=0.0, lr=0.03,
        batch_size=32, patience=5, max_epochs=100, seed=0) -> IntentClassifier:
    """Minibatch SGD with early stopping; returns the best-dev-accuracy weights."""
    rng = np.random.default_rng(seed)
    index = {y: i for i, y in enumerate(labels)}
    ty = np.array([index[y] for y in train_y])
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0) + 1e-6
    clf = IntentClassifier(list(labels), mean, std,
                           _init_weights(train_x.shape[1], hidden, len(labels), rng),
                           hidden, dropout, lr)
    best, best_w, stale = -1.0, None, 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(ty))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            params = {k: nm.Tensor(v, requires_grad=True) for k, v in clf.weights.items()}
            trained = IntentClassifier(clf.labels, mean, std, params, hidden, dropout, lr)
            targets = np.eye(len(labels), dtype=np.float32)[ty[idx]]
            loss = nm.scale(nm.soft_cross_entropy(trained.logits(train_x[idx], rng), targets),
                            1.0 / len(idx))
            loss.backward()
            for k, t in params.items():
                clf.weights[k] = clf.weights[k] - np.float32(lr) * t.grad
        acc = clf.accuracy(dev_x, dev_y)
        clf.history.append({"epoch": epoch, "dev_accuracy": acc})
        if acc > best:
            best, best_w, stale = acc, {k: v.copy() for k, v in clf.weights.items()}, 0
        else:
            stale += 1
            if stale >= patience:
                break
    clf.weights = best_w
    return clf


def train_intent_classifier(train_x, train_y, dev_x, dev_y, hidden_grid=HIDDEN_GRID,
                            dropout_grid=DROPOUT_GRID, lr_grid=LR_GRID, seed=0,
                            **fit_kwargs) -> IntentClassifier:
    """Grid search over (hidden, dropout, lr), picking the best dev accuracy."""
    labels = sorted(set(train_y))
    if len(labels) < 2:
        raise IntentError("intent classification needs at least two classes")
    unknown = set(dev_y) - set(labels)
    if unknown:
        raise IntentError(f"dev labels missing from training data: {sorted(unknown)[:5]}")
    best, best_acc = None, -1.0
    for hidden, dropout, lr in itertools.product(hidden_grid, dropout_grid, lr_grid):
        clf = fit(train_x, train_y, dev_x, dev_y, labels, hidden, dropout, lr,
                  seed=seed, **fit_kwargs)
        acc = clf.accuracy(dev_x, dev_y)
        log.info("grid hidden=%d dropout=%.2f lr=%.3f dev=%.4f", hidden, dropout, lr, acc)
        if acc > best_acc:
            best, best_acc = clf, acc
    return best


def classify(features: np.ndarray, clf: IntentClassifier):
    """(label, probability vector) for one feature row; argmax ties go to the lower index."""
    p = clf.predict_proba(np.asarray(features)[None, :])[0]
    return clf.labels[int(np.argmax(p))], p
