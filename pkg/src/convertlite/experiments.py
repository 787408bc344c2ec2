"""Desk-scale experiments on the synthetic corpora.

Both tasks plant a keyword that a response shares with its context (or with an
earlier turn). Training uses ``TOY_TRAIN``: the pretraining schedule with a
smaller batch, a lower starting learning rate and a shorter score anneal, since
the small tower collapses to a constant encoding at lr 1.0.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import synthetic as syn
from .encoder import small_config, with_ablation
from .evaluation import build_instances
from .model import ConveRTModel
from .tokenizer import VocabConfig, build_vocab
from .training import Corpus, TrainConfig, Trainer

TOY_TRAIN = dict(batch_size=64, lr_start=0.1, anneal_steps=500)
TOY_MIN_FREQUENCY = 5


@dataclass
class ToyRun:
    model: ConveRTModel
    trainer: Trainer
    instances: list
    test_records: list

    @property
    def curve(self) -> list:
        """(completed steps, held-out R@1) at every evaluation."""
        return [(r["step"] + 1, r["valid_recall_at_1"]) for r in self.trainer.history
                if "valid_recall_at_1" in r]

    @property
    def final_recall(self) -> float:
        return self.curve[-1][1]

    def first_step_reaching(self, threshold: float):
        for step, r in self.curve:
            if r >= threshold:
                return step
        return None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.trainer.history])


def _run(records, groups, multi, steps, pool, n_test, seed, eval_every, ablations, precision,
         train_overrides, model_overrides):
    tr_r, _, te_r, te_g = syn.split(records, groups, n_test, seed)
    vocab = build_vocab(syn.corpus_lines(tr_r), VocabConfig(min_frequency=TOY_MIN_FREQUENCY))
    cfg = small_config(vocab.size, multi_context=multi, **model_overrides)
    for letter in ablations:
        cfg = with_ablation(cfg, letter)
    model = ConveRTModel(cfg, vocab, seed=seed)
    # the model's vocab carries the config's bucket count (ablation D changes it)
    corpus = Corpus.from_records(tr_r, model.vocab, mode="multi" if multi else "single")
    pairs = [(r.context, r.response, r.extra_contexts) for r in te_r]
    instances = build_instances(pairs, pool, np.random.default_rng(seed + 1), te_g)
    tc = TrainConfig(**{**TOY_TRAIN, "precision": precision, "max_steps": steps,
                        "eval_every": eval_every or steps, "seed": seed, **train_overrides})
    trainer = Trainer(model, tc, corpus, valid_instances=instances)
    trainer.train()
    return ToyRun(model, trainer, instances, te_r)


def keyword_task(steps: int = 600, precision: str = "mixed", pool: int = 20, seed: int = 0,
                 eval_every: int = 100, ablations=(), n_pairs: int = 5000, n_test: int = 1000,
                 train_overrides=None, model_overrides=None) -> ToyRun:
    """Single-turn task: context and response share one keyword; scored by R_pool@1."""
    records, groups = syn.keyword_pairs(n_pairs, seed=seed)
    return _run(records, groups, False, steps, pool, n_test, seed, eval_every, ablations,
                precision, train_overrides or {}, model_overrides or {})


def history_task(multi: bool, steps: int = 500, precision: str = "mixed", pool: int = 10,
                 seed: int = 0, eval_every: int = 100, n_pairs: int = 5000, n_test: int = 1000,
                 n_turns: int = 2, turn_length=(2, 4), train_overrides=None,
                 model_overrides=None) -> ToyRun:
    """The keyword sits in one earlier turn only; the immediate context carries none."""
    records, groups = syn.history_pairs(n_pairs, n_turns=n_turns, turn_length=turn_length,
                                        seed=seed)
    return _run(records, groups, multi, steps, pool, n_test, seed, eval_every, (), precision,
                train_overrides or {}, model_overrides or {})
