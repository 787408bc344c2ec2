"""Corpus ingestion, ADADELTA, cosine learning-rate decay and the training loop."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numeric as nm
from .encoder import encode_r, pad_batch
from .evaluation import recall_at_k
from .heads import project
from .model import ConveRTModel
from .multicontext import MAX_EXTRA_CONTEXTS, build_extra_context, multi_context_loss
from .objective import ScoreConfig, anneal_scale, batch_loss
from .quantization import LOSS_SCALE, RANGE_UPDATE_PERIOD, LossScaler, update_quant_range
from .serialization import save_model
from .tokenizer import SubwordVocab, tokenize

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 512
    lr_start: float = 1.0
    lr_end: float = 0.001
    rho: float = 0.9
    adadelta_eps: float = 1e-6
    l2_reg: float = 1e-5
    embed_grad_clip: float = 1.0
    smoothing: float = 0.2
    dropout: float = 0.0
    max_steps: int = 10_000
    anneal_steps: int = 10_000
    precision: str = "mixed"  # "mixed" = quantization-aware, "fp32" = plain float32
    loss_scale: float = LOSS_SCALE
    range_update_period: int = RANGE_UPDATE_PERIOD
    objective_weights: tuple = (1.0, 1.0, 1.0)
    num_shards: int = 1
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective_weights"] = list(self.objective_weights)
        return d


def finetune_config(**overrides) -> TrainConfig:
    """Fine-tuning regime: batch 256, lr 0.1 -> 1e-4, dropout 0.2, 60K steps."""
    base = dict(batch_size=256, lr_start=0.1, lr_end=0.0001, dropout=0.2, max_steps=60_000)
    base.update(overrides)
    return TrainConfig(**base)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_start at step 0 to lr_end at max_steps."""
    if cfg.max_steps <= 0:
        return cfg.lr_start
    t = min(max(step, 0), cfg.max_steps) / cfg.max_steps
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * t)) / 2.0


class Adadelta:
    """Zeiler's ADADELTA with an extra global learning-rate multiplier."""

    def __init__(self, rho: float = 0.9, eps: float = 1e-6):
        self.rho = rho
        self.eps = eps
        self.sq_grad = {}
        self.sq_update = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        rho, eps = self.rho, self.eps
        for name, g in grads.items():
            p = params[name]
            if name not in self.sq_grad:
                self.sq_grad[name] = np.zeros_like(p)
                self.sq_update[name] = np.zeros_like(p)
            eg, ed = self.sq_grad[name], self.sq_update[name]
            eg *= rho
            eg += (1.0 - rho) * g * g
            delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1.0 - rho) * delta * delta
            p -= (lr * delta).astype(p.dtype)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.sq_grad:
            out[f"adadelta.sq_grad.{name}"] = self.sq_grad[name]
            out[f"adadelta.sq_update.{name}"] = self.sq_update[name]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for key, a in arrays.items():
            kind, name = key[len("adadelta."):].split(".", 1)
            target = self.sq_grad if kind == "sq_grad" else self.sq_update
            target[name] = np.array(a)


def clip_by_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(g.astype(np.float64) ** 2)))
    if norm > max_norm > 0:
        return (g * (max_norm / norm)).astype(g.dtype)
    return g


# --- data ---------------------------------------------------------------------------


@dataclass
class CorpusRecord:
    context: str
    response: str
    extra_contexts: list = field(default_factory=list)  # oldest first


@dataclass
class Example:
    context: tuple
    response: tuple
    extra: tuple = ()


def parse_record(line: str) -> CorpusRecord | None:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    ctx, resp = obj.get("context"), obj.get("response")
    extra = obj.get("extra_contexts") or []
    if not isinstance(ctx, str) or not isinstance(resp, str):
        return None
    if not isinstance(extra, list) or not all(isinstance(t, str) for t in extra):
        return None
    return CorpusRecord(ctx, resp, extra)


class Corpus:
    """Tokenized training pairs plus the count of skipped records."""

    def __init__(self, examples: list, mode: str = "single", skipped: int = 0,
                 records: list | None = None):
        self.examples = examples
        self.mode = mode
        self.skipped = skipped
        self.records = records or []

    def __len__(self):
        return len(self.examples)

    @classmethod
    def from_records(cls, records, vocab: SubwordVocab, mode: str = "single",
                     extra_context_mode: str = "pretrain", max_seq_len: int = 60) -> "Corpus":
        if mode not in ("single", "multi"):
            raise ValueError(f"unknown corpus mode {mode!r}")
        examples, kept, skipped = [], [], 0
        for rec in records:
            if rec is None:
                skipped += 1
                continue
            ctx = tokenize(rec.context, vocab, max_seq_len)
            resp = tokenize(rec.response, vocab, max_seq_len)
            if not ctx.length or not resp.length:
                skipped += 1
                continue
            extra = ()
            if mode == "multi":
                z = build_extra_context(rec.extra_contexts[-MAX_EXTRA_CONTEXTS:],
                                        extra_context_mode)
                extra = tokenize(z, vocab, max_seq_len).ids
            examples.append(Example(ctx.ids, resp.ids, extra))
            kept.append(rec)
        if not examples:
            raise IngestError(f"no usable records ({skipped} skipped)")
        return cls(examples, mode, skipped, kept)

    def batches(self, batch_size: int, rng: np.random.Generator):
        """One shuffled epoch of full batches; the remainder is dropped."""
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if len(self.examples) < batch_size:
            raise IngestError(f"corpus has {len(self.examples)} examples, "
                              f"fewer than one batch of {batch_size}")
        order = rng.permutation(len(self.examples))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield [self.examples[i] for i in order[start:start + batch_size]]


def ingest(path, vocab: SubwordVocab, mode: str = "single",
           extra_context_mode: str = "pretrain", max_seq_len: int = 60) -> Corpus:
    """Read newline-delimited JSON {"context", "response", "extra_contexts"?}."""
    with open(path, encoding="utf-8") as f:
        records = [parse_record(line) for line in f if line.strip()]
    return Corpus.from_records(records, vocab, mode, extra_context_mode, max_seq_len)


# --- training -----------------------------------------------------------------------


class Trainer:
    def __init__(self, model: ConveRTModel, config: TrainConfig, corpus: Corpus,
                 valid_instances=None, log_path=None, checkpoint_path=None):
        if corpus.mode == "multi" and not model.cfg.multi_context:
            raise ValueError("multi-context corpus needs a multi-context model")
        top = max((max(s) for e in corpus.examples for s in (e.context, e.response, e.extra)
                   if s), default=-1)
        if top >= model.cfg.n_embeddings:
            raise ValueError(f"corpus token id {top} exceeds the model's "
                             f"{model.cfg.n_embeddings} embedding rows (vocab mismatch?)")
        self.model = model
        self.config = config
        self.corpus = corpus
        self.valid_instances = valid_instances
        self.log_path = log_path
        self.checkpoint_path = checkpoint_path
        self.optimizer = Adadelta(config.rho, config.adadelta_eps)
        self.scaler = LossScaler(config.loss_scale if config.precision == "mixed" else 1.0)
        self.rng = np.random.default_rng(config.seed)
        self.score_cfg = ScoreConfig(model.cfg.out_dim, config.anneal_steps, config.smoothing)
        self.history = []
        if model.cfg.dropout != config.dropout:
            model.cfg = replace(model.cfg, dropout=config.dropout)

    @property
    def quantized(self) -> bool:
        return self.config.precision == "mixed"

    def _encode_side(self, params, seqs, side, rng):
        """Encode in ``num_shards`` independent slices, then gather before the loss."""
        cfg = self.model.cfg
        shards = np.array_split(np.arange(len(seqs)), max(1, self.config.num_shards))
        outs = []
        for idx in shards:
            if not len(idx):
                continue
            ids, lengths = pad_batch([seqs[i] for i in idx])
            outs.append(project(params, encode_r(params, ids, lengths, cfg, rng), side, cfg))
        return outs[0] if len(outs) == 1 else nm.concat(outs, axis=0)

    def loss(self, params: dict, batch: list, train: bool = True):
        """Forward pass for one batch; returns (loss tensor, per-objective floats)."""
        rng = self.rng if train and self.model.cfg.dropout > 0 else None
        step = self.model.step
        with nm.precision("mixed" if self.quantized else "fp32"):
            h_x = self._encode_side(params, [e.context for e in batch], "input", rng)
            h_y = self._encode_side(params, [e.response for e in batch], "response", rng)
            if self.corpus.mode == "multi":
                h_z = self._encode_side(params, [e.extra for e in batch], "extra", rng)
                return multi_context_loss(h_x, h_z, h_y, step, self.score_cfg,
                                          self.config.objective_weights)
            loss = batch_loss(h_x, h_y, step, self.score_cfg)
        return loss, {"immediate": float(loss.data)}

    def gradients(self, batch: list):
        """Scaled backward pass; returns (loss tensor, parts, raw scaled grads)."""
        params = self.model.render(self.quantized, requires_grad=True)
        loss, parts = self.loss(params, batch)
        loss.backward(np.asarray(self.scaler.scale, dtype=loss.data.dtype))
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for n, t in params.items()}
        return loss, parts, grads

    def train_step(self, batch: list) -> dict:
        cfg = self.config
        loss, parts, grads = self.gradients(batch)
        grads = self.scaler.unscale(grads)
        lr = learning_rate(self.model.step, cfg)
        record = {
            "step": self.model.step, "loss": float(loss.data), "losses": parts, "lr": lr,
            "scale": anneal_scale(self.model.step, self.score_cfg), "skipped": grads is None,
        }
        if grads is not None:
            shadows = self.model.shadows()
            grads["embed"] = clip_by_norm(grads["embed"], cfg.embed_grad_clip)
            if cfg.l2_reg:
                for name, g in grads.items():
                    g += np.float32(cfg.l2_reg) * shadows[name]
            self.optimizer.step(shadows, grads, lr)
        self.model.step += 1
        if self.quantized and cfg.range_update_period and \
                self.model.step % cfg.range_update_period == 0:
            emb = self.model.params["embed"].shadow
            self.model.qrange = update_quant_range(
                self.model.qrange, float(emb.min()), float(emb.max()))
        return record

    def validate(self, k: int = 1) -> float:
        """R_N@k on the held-out instances, N being their pool size."""
        inst = self.valid_instances
        view = EncoderView(self.model, self.quantized)
        return recall_at_k(inst, view, len(inst[0].candidates), k)

    def _emit(self, record: dict, log_file):
        self.history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    def train(self) -> list:
        cfg = self.config
        log_file = open(self.log_path, "a", encoding="utf-8") if self.log_path else None
        try:
            if cfg.max_steps <= self.model.step:
                self._checkpoint()
                return self.history
            while self.model.step < cfg.max_steps:
                for batch in self.corpus.batches(cfg.batch_size, self.rng):
                    record = self.train_step(batch)
                    if not np.isfinite(record["loss"]) and not record["skipped"]:
                        raise FloatingPointError(f"non-finite loss at step {record['step']}")
                    step = self.model.step
                    if self.valid_instances and cfg.eval_every and (
                            step % cfg.eval_every == 0 or step == cfg.max_steps):
                        record["valid_recall_at_1"] = self.validate()
                    self._emit(record, log_file)
                    if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                        self._checkpoint()
                    if step >= cfg.max_steps:
                        break
            self._checkpoint()
        finally:
            if log_file is not None:
                log_file.close()
        return self.history

    def _checkpoint(self):
        if not self.checkpoint_path:
            return
        save_model(self.model, self.checkpoint_path)
        save_training_state(self, state_path(self.checkpoint_path))


class EncoderView:
    """Adapter: evaluation encoders for a model in its training precision."""

    def __init__(self, model: ConveRTModel, quantized: bool):
        self.model = model
        self.quantized = quantized

    def encode_context(self, texts, extra_contexts=None):
        return self.model.encode_context(texts, extra_contexts, self.quantized)

    def encode_response(self, texts):
        return self.model.encode_response(texts, self.quantized)


def state_path(checkpoint_path) -> str:
    return os.fspath(checkpoint_path) + ".state.npz"


def save_training_state(trainer: Trainer, path) -> None:
    """Full-precision shadows, optimizer accumulators, step and quant range for resuming."""
    m = trainer.model
    arrays = {f"param.{n}": p.shadow for n, p in m.params.items()}
    arrays.update(trainer.optimizer.state_arrays())
    meta = {"step": m.step, "qrange": [m.qrange.lo, m.qrange.hi],
            "rng": trainer.rng.bit_generator.state, "skips": trainer.scaler.total_skips}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_training_state(trainer: Trainer, path) -> None:
    from .quantization import QuantRange

    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        params = {k[len("param."):]: data[k] for k in data.files if k.startswith("param.")}
        opt = {k: data[k] for k in data.files if k.startswith("adadelta.")}
    trainer.model.load_arrays(params, QuantRange(*meta["qrange"]))
    trainer.model.step = int(meta["step"])
    trainer.optimizer.load_state_arrays(opt)
    trainer.rng.bit_generator.state = meta["rng"]
