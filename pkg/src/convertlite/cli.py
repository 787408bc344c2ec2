"""Command-line entry points: ``convertlite <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
Option values resolve as: command-line flag > ``--config`` JSON file > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .encoder import DEFAULT_CAPS, ModelConfig, with_ablation
from .evaluation import CopyEncoder, mrr_from_scores, read_eval_file, recall_from_scores, \
    score_instances
from .intent import DROPOUT_GRID, HIDDEN_GRID, LR_GRID, IntentClassifier, IntentDataset, \
    classify, train_intent_classifier
from .model import ConveRTModel
from .quantization import LOSS_SCALE, RANGE_UPDATE_PERIOD, DivergenceError
from .serialization import inspect_model, load_model
from .tokenizer import SubwordVocab, VocabConfig, build_vocab
from .training import TrainConfig, Trainer, finetune_config, ingest, load_training_state, \
    parse_record, state_path

log = logging.getLogger("convertlite")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

_PRETRAIN = TrainConfig()
_FINETUNE = finetune_config()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv(values) -> str:
    return ",".join(str(v) for v in values)


# --- parser -------------------------------------------------------------------------


def _add_model_flags(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--d-model", type=int, default=512, help="subword embedding / tower width")
    g.add_argument("--attn-dim", type=int, default=64, help="attention projection width")
    g.add_argument("--ff-dim", type=int, default=2048, help="feed-forward inner width")
    g.add_argument("--layers", type=int, default=6, help="transformer blocks")
    g.add_argument("--caps", type=_ints, default=_csv(DEFAULT_CAPS),
                   help="per-layer maximum relative attention")
    g.add_argument("--heads", type=int, default=1, help="attention heads per block")
    g.add_argument("--reduction-heads", type=int, default=2, help="self-attention reduction heads")
    g.add_argument("--head-hidden", type=int, default=1024, help="projection head hidden width")
    g.add_argument("--head-layers", type=int, default=3, help="projection head hidden layers")
    g.add_argument("--out-dim", type=int, default=512, help="final encoding width")
    g.add_argument("--oov-buckets", type=int, default=1000, help="hash buckets for unseen chars")
    g.add_argument("--max-seq-len", type=int, default=60, help="subword truncation length")
    g.add_argument("--multi-context", action="store_true",
                   help="add the extra-context head and combined objective")
    g.add_argument("--ablation", action="append", choices=list("ABCDEF"), default=[],
                   help="apply an ablation toggle (repeatable)")


def _add_train_flags(p, base: TrainConfig):
    g = p.add_argument_group("optimisation")
    g.add_argument("--batch-size", type=int, default=base.batch_size,
                   help="K, pairs per batch (in-batch negatives)")
    g.add_argument("--lr-start", type=float, default=base.lr_start,
                   help="learning rate at step 0 (cosine decay)")
    g.add_argument("--lr-end", type=float, default=base.lr_end, help="learning rate at max-steps")
    g.add_argument("--rho", type=float, default=base.rho, help="ADADELTA decay")
    g.add_argument("--adadelta-eps", type=float, default=base.adadelta_eps, help="ADADELTA epsilon")
    g.add_argument("--l2-reg", type=float, default=base.l2_reg, help="L2 penalty on all weights")
    g.add_argument("--embed-grad-clip", type=float, default=base.embed_grad_clip,
                   help="norm cap on the subword embedding gradient")
    g.add_argument("--smoothing", type=float, default=base.smoothing, help="label smoothing")
    g.add_argument("--dropout", type=float, default=base.dropout, help="dropout rate")
    g.add_argument("--max-steps", type=int, default=base.max_steps, help="training steps")
    g.add_argument("--anneal-steps", type=int, default=base.anneal_steps,
                   help="steps to anneal the score scale from 1 to sqrt(d)")
    g.add_argument("--precision", choices=("mixed", "fp32"), default=base.precision,
                   help="mixed = quantization-aware 8/16-bit, fp32 = plain float32")
    g.add_argument("--loss-scale", type=float, default=LOSS_SCALE, help="static loss scale (mixed only)")
    g.add_argument("--range-update-period", type=int, default=RANGE_UPDATE_PERIOD,
                   help="steps between embedding quantization-range updates")
    g.add_argument("--objective-weights", type=_floats, default=_csv(base.objective_weights),
                   help="multi-context weights: immediate,extra,combined")
    g.add_argument("--num-shards", type=int, default=base.num_shards,
                   help="encode each batch in this many slices before the shared loss")
    g.add_argument("--seed", type=int, default=base.seed, help="RNG seed")
    g.add_argument("--eval-every", type=int, default=0, help="validate every N steps (0: off)")
    g.add_argument("--checkpoint-every", type=int, default=0,
                   help="checkpoint every N steps (0: only at the end)")
    io_ = p.add_argument_group("data")
    io_.add_argument("--vocab", required=True, help="vocabulary file")
    io_.add_argument("--corpus", required=True, help='JSONL {"context","response",...}')
    io_.add_argument("--out", required=True, help="model checkpoint path")
    io_.add_argument("--metrics", help="metrics JSONL path (default: <out>.metrics.jsonl)")
    io_.add_argument("--valid", help="evaluation JSONL used for periodic R@1")
    io_.add_argument("--resume", action="store_true",
                     help="continue from <out>.state.npz if it exists")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="convertlite", formatter_class=fmt,
                     description="Dual-encoder response selection: train, encode, rank, eval.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                parser_class=_Parser)
    parsers = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", help="JSON file of option defaults (flags override)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        parsers[name] = p
        return p

    vc = VocabConfig()
    p = add("build-vocab", "Build a subword vocabulary from a text corpus.")
    p.add_argument("--corpus", required=True, action="append",
                   help="corpus file (repeatable); plain text lines or JSONL pairs")
    p.add_argument("--format", choices=("text", "jsonl"), default="text", help="corpus file format")
    p.add_argument("--out", required=True, help="vocabulary file to write")
    p.add_argument("--min-frequency", type=int, default=vc.min_frequency,
                   help="minimum count to keep a subword")
    p.add_argument("--max-subword-chars", type=int, default=vc.max_subword_chars, help="longest subword")
    p.add_argument("--max-consecutive-digits", type=int, default=vc.max_consecutive_digits,
                   help="longest digit run inside a subword")
    p.add_argument("--iterations", type=int, default=vc.iterations, help="counting/segmentation rounds")
    p.add_argument("--oov-buckets", type=int, default=vc.oov_buckets, help="hash buckets for unseen chars")

    p = add("train", "Pretrain a dual encoder on (context, response) pairs.")
    _add_model_flags(p)
    _add_train_flags(p, _PRETRAIN)

    p = add("finetune", "Fine-tune a pretrained model (numbered extra-context prefixes).")
    p.add_argument("--init", required=True, help="pretrained model file")
    _add_train_flags(p, _FINETUNE)

    p = add("encode", "Encode texts (one per line) to JSONL vectors.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--input", default="-", help="text file, '-' for stdin")
    p.add_argument("--output", default="-", help="JSONL output, '-' for stdout")
    p.add_argument("--stage", choices=("r", "h"), default="h",
                   help="r = shared reduced encoding, h = side-specific projection")
    p.add_argument("--side", choices=("input", "response", "extra"), default="input",
                   help="projection head for --stage h")

    p = add("rank", "Rank candidate responses for one context.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--context", required=True, help="immediate context text")
    p.add_argument("--candidates", required=True, help="candidate file, one per line")
    p.add_argument("--extra-context", action="append", default=[],
                   help="earlier turn, oldest first (repeatable)")
    p.add_argument("--top", type=int, default=0, help="print only the best N (0: all)")

    p = add("eval", "Report R_N@k and MRR on an evaluation file.")
    p.add_argument("--model", help="model file")
    p.add_argument("--vocab", help="vocabulary file")
    p.add_argument("--data", required=True, help='JSONL {"context","candidates",...}')
    p.add_argument("--k", type=_ints, default="1", help="cut-offs, comma-separated")
    p.add_argument("--n", type=int, default=0, help="expected pool size (0: infer)")
    p.add_argument("--debug-encoder", choices=("copy",),
                   help="replace the model with a deterministic text-identity encoder")

    p = add("intent-train", "Train an intent classifier on frozen r encodings.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--data", required=True, help='JSONL {"text","label"}')
    p.add_argument("--out", required=True, help="classifier file (.npz)")
    p.add_argument("--hidden-grid", type=_ints, default=_csv(HIDDEN_GRID), help="hidden sizes tried")
    p.add_argument("--dropout-grid", type=_floats, default=_csv(DROPOUT_GRID), help="dropout rates tried")
    p.add_argument("--lr-grid", type=_floats, default=_csv(LR_GRID), help="learning rates tried")
    p.add_argument("--batch-size", type=int, default=32, help="SGD batch size")
    p.add_argument("--patience", type=int, default=5, help="early-stopping epochs")
    p.add_argument("--seed", type=int, default=0, help="split and init seed")

    p = add("intent-eval", "Evaluate or apply an intent classifier.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--classifier", required=True, help="classifier file (.npz)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help='JSONL {"text","label"} to score')
    g.add_argument("--text", action="append", help="classify this text (repeatable)")

    p = add("inspect-model", "Print header, parameter counts and size breakdown.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    parser.subparsers = parsers
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser.subparsers[args.command]
        try:
            with open(args.config, encoding="utf-8") as f:
                cfg = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ValueError(f"{args.config}: expected a JSON object")
        known = {a.dest for a in sub._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known - {"config"})
        if unknown:
            raise UsageError(f"{args.config}: unknown option(s) {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in cfg and isinstance(action.type, type(_floats)) and \
                    isinstance(cfg[action.dest], list):
                cfg[action.dest] = _csv(cfg[action.dest])
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


# --- commands -----------------------------------------------------------------------


def _open_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8")


def _read_lines(path) -> list:
    if path == "-":
        return [line.rstrip("\n") for line in sys.stdin]
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def cmd_build_vocab(args) -> int:
    def lines():
        for path in args.corpus:
            with open(path, encoding="utf-8") as f:
                for line in f:
                    if args.format == "text":
                        yield line.rstrip("\n")
                        continue
                    rec = parse_record(line)
                    if rec is not None:
                        yield rec.context
                        yield rec.response
                        yield from rec.extra_contexts

    cfg = VocabConfig(args.min_frequency, args.max_subword_chars, args.max_consecutive_digits,
                      args.iterations, args.oov_buckets)
    vocab = build_vocab(lines(), cfg)
    vocab.save(args.out)
    print(f"wrote {args.out}: {vocab.size} subwords, {vocab.oov_buckets} OOV buckets")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, lr_start=args.lr_start, lr_end=args.lr_end, rho=args.rho,
        adadelta_eps=args.adadelta_eps, l2_reg=args.l2_reg,
        embed_grad_clip=args.embed_grad_clip, smoothing=args.smoothing, dropout=args.dropout,
        max_steps=args.max_steps, anneal_steps=args.anneal_steps, precision=args.precision,
        loss_scale=args.loss_scale, range_update_period=args.range_update_period,
        objective_weights=tuple(args.objective_weights), num_shards=args.num_shards,
        seed=args.seed, eval_every=args.eval_every, checkpoint_every=args.checkpoint_every,
    )


def _model_config(args, vocab: SubwordVocab) -> ModelConfig:
    cfg = ModelConfig(
        vocab_size=vocab.size, oov_buckets=args.oov_buckets, d_model=args.d_model,
        attn_dim=args.attn_dim, ff_dim=args.ff_dim, n_layers=args.layers,
        max_relative_attention=tuple(args.caps), max_seq_len=args.max_seq_len,
        n_heads=args.heads, reduction_heads=args.reduction_heads, head_hidden=args.head_hidden,
        head_layers=args.head_layers, out_dim=args.out_dim, multi_context=args.multi_context,
        dropout=args.dropout,
    )
    for letter in args.ablation:
        cfg = with_ablation(cfg, letter)
    return cfg


def _run_training(args, model: ConveRTModel, vocab: SubwordVocab) -> int:
    tc = _train_config(args)
    mode = "multi" if model.cfg.multi_context else "single"
    corpus = ingest(args.corpus, model.vocab, mode, model.extra_context_mode,
                    model.cfg.max_seq_len)
    if corpus.skipped:
        log.warning("skipped %d unusable corpus records", corpus.skipped)
    valid = read_eval_file(args.valid) if args.valid else None
    trainer = Trainer(model, tc, corpus, valid_instances=valid,
                      log_path=args.metrics or f"{args.out}.metrics.jsonl",
                      checkpoint_path=args.out)
    if args.resume:
        try:
            load_training_state(trainer, state_path(args.out))
            log.info("resumed at step %d", model.step)
        except FileNotFoundError:
            log.info("no training state at %s; starting fresh", state_path(args.out))
    history = trainer.train()
    last = history[-1] if history else {}
    msg = f"wrote {args.out} at step {model.step}"
    if "loss" in last:
        msg += f", last loss {last['loss']:.4f}"
    if "valid_recall_at_1" in last:
        msg += f", valid R@1 {last['valid_recall_at_1']:.4f}"
    print(msg)
    return EXIT_OK


def cmd_train(args) -> int:
    vocab = SubwordVocab.load(args.vocab)
    model = ConveRTModel(_model_config(args, vocab), vocab, seed=args.seed)
    return _run_training(args, model, vocab)


def cmd_finetune(args) -> int:
    vocab = SubwordVocab.load(args.vocab)
    model = load_model(args.init, vocab)
    model.extra_context_mode = "finetune"
    model.step = 0
    return _run_training(args, model, vocab)


def _load(args) -> ConveRTModel:
    return load_model(args.model, SubwordVocab.load(args.vocab))


def cmd_encode(args) -> int:
    model = _load(args)
    texts = _read_lines(args.input)
    if args.stage == "r":
        enc = model.encode_r_texts(texts)
    else:
        enc = model.encode_texts(texts, args.side)
    out = _open_out(args.output)
    try:
        for text, vec in zip(texts, enc):
            out.write(json.dumps({"text": text, "encoding": [float(v) for v in vec]}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_rank(args) -> int:
    model = _load(args)
    candidates = [c for c in _read_lines(args.candidates) if c.strip()]
    if not candidates:
        raise ValueError(f"{args.candidates}: no candidates")
    ctx = model.encode_context([args.context], [args.extra_context])[0]
    scores = model.encode_response(candidates).astype(np.float64) @ ctx.astype(np.float64)
    order = np.argsort(-scores, kind="stable")
    if args.top > 0:
        order = order[:args.top]
    for rank, i in enumerate(order, 1):
        print(f"{rank}\t{scores[i]:.6f}\t{i}\t{candidates[i]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.debug_encoder == "copy":
        encoder = CopyEncoder()
    elif args.model and args.vocab:
        encoder = _load(args)
    else:
        raise UsageError("eval needs --model and --vocab (or --debug-encoder copy)")
    instances = read_eval_file(args.data)
    scores, relevant = score_instances(instances, encoder, args.n or None)
    n = scores.shape[1]
    for k in args.k:
        print(f"R_{n}@{k}\t{recall_from_scores(scores, relevant, k):.4f}")
    print(f"MRR\t{mrr_from_scores(scores, relevant):.4f}")
    return EXIT_OK


def cmd_intent_train(args) -> int:
    model = _load(args)
    data = IntentDataset.read(args.data)
    train, dev, test = data.split(args.seed)
    if not dev.texts:
        raise ValueError("intent data too small for a train/dev/test split")
    feats = {name: model.encode_r_texts(part.texts) for name, part in
             (("train", train), ("dev", dev), ("test", test)) if part.texts}
    clf = train_intent_classifier(
        feats["train"], train.labels, feats["dev"], dev.labels, args.hidden_grid,
        args.dropout_grid, args.lr_grid, seed=args.seed, batch_size=args.batch_size,
        patience=args.patience)
    clf.save(args.out)
    print(f"wrote {args.out}: hidden={clf.hidden} dropout={clf.dropout} lr={clf.lr}")
    print(f"dev_accuracy\t{clf.accuracy(feats['dev'], dev.labels):.4f}")
    if "test" in feats:
        print(f"test_accuracy\t{clf.accuracy(feats['test'], test.labels):.4f}")
    return EXIT_OK


def cmd_intent_eval(args) -> int:
    model = _load(args)
    clf = IntentClassifier.load(args.classifier)
    if args.data:
        data = IntentDataset.read(args.data)
        acc = clf.accuracy(model.encode_r_texts(data.texts), data.labels)
        print(f"accuracy\t{acc:.4f}\t({len(data.texts)} examples)")
        return EXIT_OK
    for text, row in zip(args.text, model.encode_r_texts(args.text)):
        label, probs = classify(row, clf)
        print(f"{label}\t{float(probs.max()):.4f}\t{text}")
    return EXIT_OK


def cmd_inspect_model(args) -> int:
    info = inspect_model(args.model)
    report = {
        "version": info.version,
        "vocab_digest": info.vocab_digest.hex(),
        "step": info.config.get("step", 0),
        "multi_context": info.multi_context,
        "model": info.config["model"],
        "embedding_params": info.embedding_params,
        "network_params": info.network_params,
        "embedding_bytes": info.embedding_bytes,
        "network_bytes": info.network_bytes,
        "metadata_bytes": info.metadata_bytes,
        "total_bytes": info.total_bytes,
    }
    if args.json:
        print(json.dumps(report, indent=2))
        return EXIT_OK
    mb = 1024 * 1024
    print(f"format version   {info.version}")
    print(f"vocab digest     {report['vocab_digest']}")
    print(f"trained steps    {report['step']}")
    print(f"multi-context    {'yes' if info.multi_context else 'no'}")
    print(f"embedding params {info.embedding_params:>12,d}  {info.embedding_bytes:>12,d} bytes "
          f"({info.embedding_bytes / mb:.2f} MB, 8-bit)")
    print(f"network params   {info.network_params:>12,d}  {info.network_bytes:>12,d} bytes "
          f"({info.network_bytes / mb:.2f} MB, 16-bit)")
    print(f"metadata                       {info.metadata_bytes:>12,d} bytes")
    print(f"total                          {info.total_bytes:>12,d} bytes "
          f"({info.total_bytes / mb:.2f} MB)")
    return EXIT_OK


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "encode": cmd_encode,
    "rank": cmd_rank,
    "eval": cmd_eval,
    "intent-train": cmd_intent_train,
    "intent-eval": cmd_intent_eval,
    "inspect-model": cmd_inspect_model,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"convertlite: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"convertlite: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"convertlite: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
