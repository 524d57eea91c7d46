"""Command-line surface: prepare, train, eval, predict.

Configuration precedence is flags > config file > built-in defaults. Every
command writes its resolved configuration into its output directory, and
output directories are populated atomically (temp dir, then rename).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import os
import shutil
import sys
import tempfile

import torch

from .corpus import (
    CorpusError, DatasetSplits, Vocabulary, build_vocabulary,
    dedup_test_against_train, generate_synthetic_corpus, load_jsonl,
    load_template_metadata, save_jsonl, save_template_metadata,
    tokenize, tokenize_splits,
)
from .corpus import CodeCommentPair
from .generator import Budgets
from .joint import (
    NumericalError, TrainingConfig, config_to_dict, decode_split, predict,
    train, write_training_log,
)
from .metrics import (
    EvalPair, evaluate_pairs, load_report, wilcoxon_signed_rank, write_report,
)
from .neural import (
    ModelConfig, load_checkpoint, make_encoder, make_generator,
    parameter_hash, save_checkpoint,
)
from .retriever import RetrievalError, build_index, load_index, save_index
from .baselines import (
    BM25, FIXED_ENCODER, JOINT_DENSE, RANDOM, RETRIEVER_KINDS, TFIDF,
    Seq2SeqEncoderView, assemble_variant, build_retriever,
    train_baseline_generator, train_plain_seq2seq,
)

MODES = ("joint", "raf-bm25", "raf-fixed-encoder")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract reserves 2 for data
    def error(self, message):
        raise UsageError(message)


def _atomic_dir(target):
    """Context data for atomic directory population."""
    parent = os.path.dirname(os.path.abspath(target)) or "."
    os.makedirs(parent, exist_ok=True)
    return tempfile.mkdtemp(prefix=".tmp-", dir=parent)


def _commit_dir(tmp, target):
    if os.path.isdir(target):
        shutil.rmtree(target)
    os.replace(tmp, target)


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _load_config_defaults(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        with open(known.config, encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError as exc:
        raise CorpusError(f"config file not found: {known.config}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed config file {known.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CorpusError(f"config file {known.config} must hold a JSON object")
    return cfg


# --- prepare ------------------------------------------------------------------

def cmd_prepare(args):
    if args.synthetic:
        t, s = args.synthetic
        corpus = generate_synthetic_corpus(t, s, seed=args.seed)
        raw_splits, template_of = corpus.splits, corpus.template_of
    else:
        if not (args.train and args.valid and args.test):
            raise UsageError("prepare needs --synthetic T S or --train/--valid/--test")
        raw_splits = DatasetSplits(train=load_jsonl(args.train),
                                   validation=load_jsonl(args.valid),
                                   test=load_jsonl(args.test))
        template_of = None

    vocab = build_vocabulary(raw_splits.train, min_freq=args.min_freq)
    tokenized = dedup_test_against_train(tokenize_splits(raw_splits, vocab))

    tmp = _atomic_dir(args.out)
    try:
        save_jsonl(tokenized.train, os.path.join(tmp, "train.jsonl"))
        save_jsonl(tokenized.validation, os.path.join(tmp, "valid.jsonl"))
        save_jsonl(tokenized.test, os.path.join(tmp, "test.jsonl"))
        vocab.save(os.path.join(tmp, "vocab.tsv"))
        if template_of is not None:
            save_template_metadata(template_of, os.path.join(tmp, "templates.json"))
        _write_json({
            "command": "prepare",
            "seed": args.seed,
            "synthetic": args.synthetic,
            "min_freq": args.min_freq,
            "vocab_size": len(vocab),
            "split_sizes": {"train": len(tokenized.train),
                            "validation": len(tokenized.validation),
                            "test": len(tokenized.test)},
        }, os.path.join(tmp, "config.json"))
        _commit_dir(tmp, args.out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote dataset artifacts to {args.out}")
    return 0


def load_prepared(data_dir):
    """Load a prepare output directory into tokenized splits plus vocab."""
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.tsv"))
    raw = DatasetSplits(
        train=load_jsonl(os.path.join(data_dir, "train.jsonl")),
        validation=load_jsonl(os.path.join(data_dir, "valid.jsonl")),
        test=load_jsonl(os.path.join(data_dir, "test.jsonl")),
    )
    return tokenize_splits(raw, vocab), vocab


# --- train --------------------------------------------------------------------

def _training_config(args):
    return TrainingConfig(
        k=args.k, epochs=args.epochs, patience=args.patience,
        batch_size=args.batch_size, grad_accum=args.grad_accum,
        beam_size=args.beam, learning_rate=args.lr,
        retriever_learning_rate=args.retriever_lr,
        freeze_generator=args.freeze_generator,
        copy_warmup_epochs=args.copy_warmup,
        retriever_warmup_epochs=args.retriever_warmup,
        seed=args.seed, max_decode_len=args.max_decode_len,
        budgets=Budgets(code=args.code_budget, comment=args.comment_budget,
                        total=args.total_budget),
    )


def cmd_train(args):
    splits, vocab = load_prepared(args.data)
    vocab_hash = vocab.content_hash()
    model_config = ModelConfig(vocab_size=len(vocab),
                               hidden_size=args.hidden_size,
                               num_layers=args.num_layers,
                               max_positions=args.max_positions)
    try:
        tconfig = _training_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    tmp = _atomic_dir(args.out)
    try:
        manifest = {"mode": args.mode, "data_dir": os.path.abspath(args.data),
                    "vocab_hash": vocab_hash, "seed": args.seed}
        if args.mode == "joint":
            encoder = make_encoder(model_config, seed=args.seed)
            generator = make_generator(model_config, seed=args.seed + 1)
            if args.generator_init:
                generator, meta = load_checkpoint(args.generator_init)
                if meta["vocab_hash"] != vocab_hash:
                    raise CorpusError("generator checkpoint vocabulary mismatch")
            frozen_hash = parameter_hash(generator) if args.freeze_generator else None
            result = train(tconfig, splits, encoder, generator)
            if args.freeze_generator and parameter_hash(generator) != frozen_hash:
                raise NumericalError("frozen generator changed during training")
            save_checkpoint(result.retriever_encoder,
                            os.path.join(tmp, "retriever.pt"), "encoder", vocab_hash)
            save_checkpoint(result.generator,
                            os.path.join(tmp, "generator.pt"), "generator", vocab_hash)
            save_index(result.index, os.path.join(tmp, "index"),
                       encoder_hash=parameter_hash(result.retriever_encoder))
            write_training_log(result.log, os.path.join(tmp, "train_log.jsonl"))
            manifest.update(retriever_kind=JOINT_DENSE,
                            best_epoch=result.best_epoch,
                            best_validation_bleu=result.best_validation_bleu)
        elif args.mode == "raf-bm25":
            generator = make_generator(model_config, seed=args.seed + 1)
            retriever = build_retriever(BM25, splits.train, vocab_hash=vocab_hash)
            generator, log = train_baseline_generator(retriever, splits,
                                                      tconfig, generator)
            save_checkpoint(generator, os.path.join(tmp, "generator.pt"),
                            "generator", vocab_hash)
            write_training_log(log, os.path.join(tmp, "train_log.jsonl"))
            manifest.update(retriever_kind=BM25)
        elif args.mode == "raf-fixed-encoder":
            plain = make_generator(model_config, seed=args.seed + 2)
            plain = train_plain_seq2seq(splits, tconfig, plain)
            view = Seq2SeqEncoderView(plain)
            retriever = build_retriever(FIXED_ENCODER, splits.train,
                                        encoder=view, vocab_hash=vocab_hash)
            generator = make_generator(model_config, seed=args.seed + 1)
            generator, log = train_baseline_generator(retriever, splits,
                                                      tconfig, generator)
            save_checkpoint(plain, os.path.join(tmp, "encoder_seq2seq.pt"),
                            "generator", vocab_hash)
            save_checkpoint(generator, os.path.join(tmp, "generator.pt"),
                            "generator", vocab_hash)
            save_index(retriever.index, os.path.join(tmp, "index"),
                       encoder_hash=parameter_hash(plain))
            write_training_log(log, os.path.join(tmp, "train_log.jsonl"))
            manifest.update(retriever_kind=FIXED_ENCODER)
        else:
            raise UsageError(f"unknown mode: {args.mode!r}")

        _write_json({"command": "train", "mode": args.mode,
                     "model": {"vocab_size": len(vocab),
                               "hidden_size": args.hidden_size,
                               "num_layers": args.num_layers,
                               "max_positions": args.max_positions},
                     "training": config_to_dict(tconfig)},
                    os.path.join(tmp, "config.json"))
        _write_json(manifest, os.path.join(tmp, "manifest.json"))
        _commit_dir(tmp, args.out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {args.mode} checkpoints to {args.out}")
    return 0


# --- eval ---------------------------------------------------------------------

class LoadedRun:
    def __init__(self, run_dir, data_dir=None):
        with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as f:
            self.manifest = json.load(f)
        with open(os.path.join(run_dir, "config.json"), encoding="utf-8") as f:
            self.config = json.load(f)
        self.run_dir = run_dir
        data_dir = data_dir or self.manifest["data_dir"]
        self.splits, self.vocab = load_prepared(data_dir)
        if self.vocab.content_hash() != self.manifest["vocab_hash"]:
            raise CorpusError("vocabulary does not match the trained checkpoint")
        self.generator, _ = load_checkpoint(os.path.join(run_dir, "generator.pt"))
        self.encoder = None
        kind = self.manifest["retriever_kind"]
        if kind == JOINT_DENSE:
            self.encoder, _ = load_checkpoint(os.path.join(run_dir, "retriever.pt"))
        elif kind == FIXED_ENCODER:
            plain, _ = load_checkpoint(os.path.join(run_dir, "encoder_seq2seq.pt"))
            self.encoder = Seq2SeqEncoderView(plain)

    def retriever(self, kind=None, seed=0):
        kind = kind or self.manifest["retriever_kind"]
        if kind in (JOINT_DENSE, FIXED_ENCODER) and self.encoder is None:
            raise UsageError(f"run {self.run_dir} has no dense encoder for {kind!r}")
        return build_retriever(kind, self.splits.train, encoder=self.encoder,
                               seed=seed, vocab_hash=self.manifest["vocab_hash"])

    def budgets(self):
        b = self.config["training"]["budgets"]
        return Budgets(code=b["code"], comment=b["comment"], total=b["total"])


def _decode_test(run, retriever, beam_size, max_len, generator=None):
    predictor = assemble_variant(retriever, generator or run.generator,
                                 generator_vocab_hash=run.manifest["vocab_hash"],
                                 budgets=run.budgets())
    rows = []
    for pair in run.splits.test:
        tokens, exemplar = predictor.predict(pair, beam_size=beam_size,
                                             max_len=max_len)
        rows.append((pair, tokens, exemplar))
    return rows


def _report_from_rows(rows, vocab, label):
    # metrics operate on word strings (stemming), not token ids
    pairs = [EvalPair(prediction=vocab.decode(tokens),
                      reference=vocab.decode(p.comment_tokens))
             for p, tokens, _ in rows]
    report = evaluate_pairs(pairs)
    report.config = {"label": label, "samples": len(pairs)}
    return report


def _comparisons(report, other):
    out = {}
    for key in ("sentence_bleu", "rouge_l", "meteor", "cider"):
        a = report.per_sample.get(key, [])
        b = other.get("per_sample", {}).get(key, [])
        if a and b and len(a) == len(b):
            out[key] = wilcoxon_signed_rank(a, b)
    return out


def _write_predictions(rows, vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        for pair, tokens, exemplar in rows:
            f.write(json.dumps({
                "id": pair.id,
                "prediction": " ".join(vocab.decode(tokens)),
                "exemplar_id": exemplar.pair.id,
                "exemplar_score": exemplar.index_score,
            }, sort_keys=True) + "\n")


def cmd_eval(args):
    if args.k_sweep:
        return _eval_k_sweep(args)
    run = LoadedRun(args.run, data_dir=args.data)
    beam = args.beam or run.config["training"]["beam_size"]
    max_len = run.config["training"]["max_decode_len"]

    tmp = _atomic_dir(args.out)
    try:
        if args.ablate_matrix:
            _eval_matrix(args, run, beam, max_len, tmp)
        else:
            retriever = run.retriever(kind=args.retriever, seed=args.seed)
            rows = _decode_test(run, retriever, beam, max_len)
            report = _report_from_rows(rows, run.vocab, label=args.retriever
                                       or run.manifest["retriever_kind"])
            comparisons = None
            if args.compare:
                comparisons = _comparisons(report, load_report(args.compare))
            write_report(report, os.path.join(tmp, "report.json"),
                         comparisons=comparisons)
            _write_predictions(rows, run.vocab,
                               os.path.join(tmp, "predictions.jsonl"))
        _write_json({"command": "eval", "run": os.path.abspath(args.run),
                     "retriever": args.retriever, "beam": beam,
                     "seed": args.seed, "ablate_matrix": args.ablate_matrix},
                    os.path.join(tmp, "config.json"))
        _commit_dir(tmp, args.out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote evaluation to {args.out}")
    return 0


def _eval_matrix(args, run, beam, max_len, tmp):
    """One report per retriever x generator cell. The second run supplies the
    baseline generator; retrievers never receive extra fine-tuning."""
    if not args.baseline_run:
        raise UsageError("--ablate-matrix needs --baseline-run")
    baseline = LoadedRun(args.baseline_run, data_dir=args.data)
    if baseline.manifest["vocab_hash"] != run.manifest["vocab_hash"]:
        raise CorpusError("runs were trained with different vocabularies")
    generators = {"joint": run.generator, "baseline": baseline.generator}
    kinds = [run.manifest["retriever_kind"],
             baseline.manifest["retriever_kind"], RANDOM]
    for kind in dict.fromkeys(kinds):
        source = run if kind == run.manifest["retriever_kind"] else baseline
        retriever = source.retriever(kind=kind, seed=args.seed)
        for gen_name, generator in generators.items():
            rows = _decode_test(run, retriever, beam, max_len, generator=generator)
            report = _report_from_rows(rows, run.vocab, label=f"{kind}+{gen_name}")
            write_report(report, os.path.join(tmp, f"cell_{kind}_{gen_name}.json"))


def _eval_k_sweep(args):
    if not args.runs:
        raise UsageError("--k-sweep needs --runs with one run dir per k")
    table = {}
    tmp = _atomic_dir(args.out)
    try:
        for run_dir in args.runs:
            run = LoadedRun(run_dir, data_dir=args.data)
            k = run.config["training"]["k"]
            beam = args.beam or run.config["training"]["beam_size"]
            retriever = run.retriever(seed=args.seed)
            rows = _decode_test(run, retriever, beam,
                                run.config["training"]["max_decode_len"])
            report = _report_from_rows(rows, run.vocab, label=f"k={k}")
            table[str(k)] = {
                "corpus_bleu": report.corpus_bleu,
                "mean_sentence_bleu": report.mean_sentence_bleu,
                "rouge_l": report.rouge_l,
                "meteor": report.meteor,
                "cider": report.cider,
                "best_validation_bleu": run.manifest.get("best_validation_bleu"),
            }
        _write_json(table, os.path.join(tmp, "k_sweep.json"))
        _write_json({"command": "eval", "k_sweep": True,
                     "runs": [os.path.abspath(r) for r in args.runs]},
                    os.path.join(tmp, "config.json"))
        _commit_dir(tmp, args.out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote k-sweep table to {args.out}")
    return 0


# --- predict ------------------------------------------------------------------

def cmd_predict(args):
    run = LoadedRun(args.run, data_dir=args.data)
    if args.code == "-":
        code_raw = sys.stdin.read()
    else:
        with open(args.code, encoding="utf-8") as f:
            code_raw = f.read()
    code_tokens = tokenize(code_raw, run.vocab, "code")
    if not code_tokens:
        raise CorpusError("input snippet has no tokens after preprocessing")
    query = CodeCommentPair(id="<query>", code_raw=code_raw, comment_raw="",
                            code_tokens=code_tokens, comment_tokens=[])
    retriever = run.retriever(seed=args.seed)
    beam = args.beam or run.config["training"]["beam_size"]
    predictor = assemble_variant(retriever, run.generator,
                                 generator_vocab_hash=run.manifest["vocab_hash"],
                                 budgets=run.budgets())
    tokens, exemplar = predictor.predict(
        query, beam_size=beam, max_len=run.config["training"]["max_decode_len"])
    if args.show_exemplar:
        print(f"exemplar {exemplar.pair.id} (score {exemplar.index_score:.4f}): "
              f"{' '.join(run.vocab.decode(exemplar.pair.comment_tokens))}")
    print(" ".join(run.vocab.decode(tokens)))
    return 0


# --- argument wiring ----------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", help="JSON file with flag defaults")
    parser.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="racg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[], help="tokenize or synthesize a dataset")
    _add_common(p)
    p.add_argument("--synthetic", nargs=2, type=int, metavar=("T", "S"),
                   help="generate T templates with S samples each")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train joint or baseline checkpoints")
    _add_common(p)
    p.add_argument("--data", required=True, help="prepare output directory")
    p.add_argument("--mode", choices=MODES, default="joint")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-accum", type=int, default=4)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--retriever-lr", type=float, default=None)
    p.add_argument("--freeze-generator", action="store_true")
    p.add_argument("--copy-warmup", type=int, default=3)
    p.add_argument("--retriever-warmup", type=int, default=1)
    p.add_argument("--max-decode-len", type=int, default=64)
    p.add_argument("--code-budget", type=int, default=256)
    p.add_argument("--comment-budget", type=int, default=64)
    p.add_argument("--total-budget", type=int, default=512)
    p.add_argument("--hidden-size", type=int, default=64)
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--max-positions", type=int, default=512)
    p.add_argument("--generator-init", help="checkpoint to start the generator from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode the test split and score it")
    _add_common(p)
    p.add_argument("--run", help="trained checkpoint directory")
    p.add_argument("--data", help="override the data dir recorded at training")
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--retriever", choices=RETRIEVER_KINDS, default=None,
                   help="swap in a different retriever kind")
    p.add_argument("--compare", help="existing report for significance testing")
    p.add_argument("--ablate-matrix", action="store_true")
    p.add_argument("--baseline-run", help="second run for the ablation matrix")
    p.add_argument("--k-sweep", action="store_true")
    p.add_argument("--runs", nargs="+", help="run dirs for --k-sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="comment one snippet from file or stdin")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data")
    p.add_argument("--code", required=True, help="path to a snippet, or - for stdin")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--show-exemplar", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _load_config_defaults(argv)
        if defaults:
            for sub_action in parser._subparsers._group_actions:
                for sp in sub_action.choices.values():
                    known = {a.dest for a in sp._actions}
                    sp.set_defaults(**{k: v for k, v in defaults.items()
                                       if k in known})
        args = parser.parse_args(argv)
        if args.command == "eval" and not (args.run or args.k_sweep):
            raise UsageError("eval needs --run (or --k-sweep with --runs)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, RetrievalError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
