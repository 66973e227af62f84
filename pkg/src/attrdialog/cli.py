"""Command-line surface: synth, train-classifier, tag, train, rl-finetune,
eval, and chat.

Every stochastic command funnels randomness through --seed (default 0).
Config files are JSON; command-line flags override file values, and the
effective configuration is echoed into the written artifacts. Commands
exit 1 on module errors and 2 on flag misuse (argparse's convention).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as corpus_mod
from . import evaluation, rl, tagger, training
from .corpus import (
    AttributeSchema,
    CorpusGenerator,
    Vocabulary,
    load_corpus,
    load_dull_set,
    save_corpus,
    synthesize_corpus,
)
from .model import ModelConfig
from .training import (
    TrainHyper,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _schema_from_args(args, config: dict) -> AttributeSchema:
    if getattr(args, "schema", None):
        return AttributeSchema.from_dict(_read_json(args.schema))
    if "schema" in config:
        return AttributeSchema.from_dict(config["schema"])
    return AttributeSchema.empty()


def _vocab_path_for(checkpoint_path, override):
    return Path(override) if override else Path(f"{checkpoint_path}.vocab")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    gen = CorpusGenerator.from_file(args.config)
    result = synthesize_corpus(gen, seed=args.seed)
    save_corpus(result.dialogs, result.schema, result.vocab, args.out)
    tables = _read_json(args.config)
    tables["seed"] = args.seed
    _write_json(tables, f"{args.out}.tables.json")
    result.vocab.save(f"{args.out}.vocab")
    print(f"wrote {len(result.dialogs)} dialogs to {args.out}")
    return 0


def cmd_train(args) -> int:
    config_file = _read_json(args.config) if args.config else {}
    schema = _schema_from_args(args, config_file)
    dialogs, vocab = load_corpus(args.corpus, schema,
                                 vocab_cap=args.vocab_cap)

    model_cfg = dict(config_file.get("model", {}))
    model_cfg["vocab_size"] = vocab.size
    model_cfg["schema"] = schema
    if args.context_window is not None:
        model_cfg["context_window"] = args.context_window
    config = ModelConfig(**model_cfg)
    hyper = TrainHyper(**config_file.get("train", {}))

    result = training.train_mle(dialogs, config, hyper, seed=args.seed)
    save_checkpoint(result.checkpoint, args.out)
    vocab.save(f"{args.out}.vocab")
    _write_jsonl(result.history, f"{args.out}.log.jsonl")
    effective = {"model": config.to_dict(), "train": vars(hyper),
                 "seed": args.seed, "corpus": str(args.corpus)}
    _write_json(effective, f"{args.out}.config.json")

    from . import plots
    plots.plot_training_history(result.history, f"{args.out}.png")
    print(f"best validation perplexity {result.best_valid_ppl:.4f} "
          f"(epoch {result.best_epoch}); checkpoint at {args.out}")
    return 0


def cmd_train_classifier(args) -> int:
    config_file = _read_json(args.config) if args.config else {}
    schema = _schema_from_args(args, config_file)
    dialogs, vocab = load_corpus(args.corpus, schema, vocab_cap=args.vocab_cap)

    cls_cfg = dict(config_file.get("classifier", {}))
    cls_cfg.update(family=args.family, variant=args.variant,
                   vocab_size=vocab.size, schema=schema)
    config = tagger.ClassifierConfig(**cls_cfg)
    hyper = tagger.ClassifierHyper(**config_file.get("train", {}))

    result = tagger.train_classifier(dialogs, config, hyper, seed=args.seed)
    save_checkpoint(tagger.checkpoint_from_classifier(result.classifier,
                                                      rng_seed=args.seed),
                    args.out)
    vocab.save(f"{args.out}.vocab")
    _write_json({"classifier": config.to_dict(),
                 "valid_accuracy": result.valid_accuracy,
                 "majority_baseline": result.majority_baseline,
                 "seed": args.seed}, f"{args.out}.config.json")
    print(f"valid accuracy {result.valid_accuracy:.4f} "
          f"(majority baseline {result.majority_baseline:.4f}); "
          f"checkpoint at {args.out}")
    return 0


def cmd_tag(args) -> int:
    classifiers = {}
    vocab = None
    for path in args.classifier:
        clf = tagger.classifier_from_checkpoint(load_checkpoint(path))
        classifiers[clf.config.family] = clf
        clf_vocab = _vocab_path_for(path, None)
        if clf_vocab.exists():
            vocab = Vocabulary.load(clf_vocab)
    if vocab is None:
        if not args.vocab:
            raise FileNotFoundError(
                "no vocabulary sidecar next to any classifier; pass --vocab")
        vocab = Vocabulary.load(args.vocab)
    schema = next(iter(classifiers.values())).config.schema
    dialogs, _ = load_corpus(args.corpus, schema, vocab)
    tagged = tagger.annotate_corpus(dialogs, classifiers, schema)

    # Merge predicted labels back onto the raw records so the original
    # surface text survives tokenization untouched.
    records = [record for _, record in corpus_mod.iter_corpus_records(args.corpus)]
    for record, dialog in zip(records, tagged):
        for raw_utt, utt in zip(record["utterances"], dialog.utterances):
            attrs = {
                fam.name: fam.labels[utt.attrs[i]]
                for i, fam in enumerate(schema.families)
                if utt.attrs[i] != fam.unknown_id
            }
            if attrs:
                raw_utt["attrs"] = attrs
    _write_jsonl(records, args.out)
    print(f"tagged {len(records)} dialogs into {args.out}")
    return 0


def cmd_rl_finetune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(_vocab_path_for(args.checkpoint, args.vocab))
    schema = AttributeSchema.from_dict(ckpt.config["schema"])
    dialogs, _ = load_corpus(args.corpus, schema, vocab)
    dull = load_dull_set(args.dull_set, vocab)

    config = rl.RlConfig(
        dull_set=dull, lr=args.lr, batch_size=args.batch_size,
        steps=args.steps, anchor_coefficient=args.anchor,
        samples_per_context=args.samples, generation_mode=args.mode,
        generation_max_len=args.max_len,
        scoring_attr_mode=args.scoring_mode,
        freeze_scorer=args.freeze_scorer,
        context_window=args.context_window,
        cache_rewards=args.cache_rewards)
    result = rl.rl_finetune(dialogs, ckpt, config, seed=args.seed)

    save_checkpoint(result.checkpoint, args.out)
    vocab.save(f"{args.out}.vocab")
    _write_jsonl(result.history, f"{args.out}.rl.jsonl")
    effective = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(effective, f"{args.out}.config.json")

    from . import plots
    plots.plot_rl_history(result.history, f"{args.out}.png")
    final = result.history[-1] if result.history else {}
    print(f"fine-tuned for {args.steps} steps "
          f"(final mean reward {final.get('mean_reward', float('nan')):.4f}); "
          f"checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    vocab = Vocabulary.load(_vocab_path_for(args.checkpoint, args.vocab))
    dialogs, _ = load_corpus(args.corpus, model.config.schema, vocab)
    word_vectors = (evaluation.load_word_vectors(args.word_vectors)
                    if args.word_vectors else None)
    dull_texts = None
    if args.dull_set:
        dull_texts = load_dull_set(args.dull_set, vocab).texts

    rng = np.random.default_rng(args.seed)
    report = evaluation.evaluate_model(
        model, dialogs, vocab, word_vectors=word_vectors,
        dull_texts=dull_texts, mode=args.mode, max_len=args.max_len, rng=rng)
    report["config"] = {"checkpoint": str(args.checkpoint),
                        "corpus": str(args.corpus), "seed": args.seed,
                        "mode": args.mode, "max_len": args.max_len}
    _write_json(report, args.out)

    from . import plots
    plots.plot_metrics(report, f"{args.out}.png")
    print(json.dumps({k: report[k] for k in
                      ("perplexity", "distinct1", "distinct2", "emb_average",
                       "emb_greedy", "emb_extrema")}, sort_keys=True))
    return 0


def cmd_chat(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    vocab = Vocabulary.load(_vocab_path_for(args.checkpoint, args.vocab))
    schema = model.config.schema
    rng = np.random.default_rng(args.seed)
    history: list = []
    overrides: dict[str, int] = {}

    print("attrdialog chat; /set <family> <label> pins an attribute, "
          "/quit leaves", file=sys.stderr)
    while True:
        try:
            line = input("> ")
        except EOFError:
            break
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line.startswith("/set "):
            parts = line.split()
            if len(parts) != 3:
                print("usage: /set <family> <label>", file=sys.stderr)
                continue
            try:
                fam = schema.family(parts[1])
                overrides[parts[1]] = fam.label_id(parts[2])
                print(f"pinned {parts[1]}={parts[2]} for the next turn",
                      file=sys.stderr)
            except corpus_mod.CorpusError as exc:
                print(str(exc), file=sys.stderr)
            continue

        history.append(corpus_mod.Utterance(
            token_ids=vocab.encode_text(line),
            attrs=schema.unknown_assignment()))
        prefix = history[-model.config.context_window:]
        tokens, chosen = model.respond(prefix, mode=args.mode,
                                       max_len=args.max_len, rng=rng,
                                       attr_overrides=overrides or None)
        overrides = {}
        shown = ", ".join(
            f"{fam.name}={fam.labels[chosen[i]]}"
            for i, fam in enumerate(schema.families))
        if shown:
            print(f"[{shown}]")
        print(vocab.decode(tokens))
        reply_attrs = schema.unknown_assignment()
        for i in range(schema.k):
            reply_attrs[i] = int(chosen[i])
        history.append(corpus_mod.Utterance(
            token_ids=(tokens if tokens and tokens[-1] == corpus_mod.EOS
                       else tokens + [corpus_mod.EOS]),
            attrs=reply_attrs))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrdialog",
        description="attribute-conditional dialog generation at desk scale")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a corpus from generator tables")
    p.add_argument("--config", required=True, help="generator config JSON")
    p.add_argument("--out", required=True, help="corpus JSONL to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="supervised MLE training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--schema", help="JSON file with attribute families")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--context-window", type=int, default=None)
    p.add_argument("--vocab-cap", type=int, default=25000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-classifier", help="train an attribute classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--variant", required=True, choices=["u", "da", "uda"])
    p.add_argument("--config", help="JSON with 'classifier' and 'train' sections")
    p.add_argument("--schema", help="JSON file with attribute families")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-cap", type=int, default=25000)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("tag", help="auto-annotate a corpus with classifiers")
    p.add_argument("--corpus", required=True)
    p.add_argument("--classifier", required=True, action="append",
                   help="classifier checkpoint (repeatable)")
    p.add_argument("--vocab", help="vocabulary file override")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("rl-finetune", help="REINFORCE attribute-policy tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--dull-set", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocabulary file override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--anchor", type=float, default=0.01,
                   help="L2 anchor coefficient toward supervised weights")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--scoring-mode",
                   choices=["argmax", "sample", "expected"], default="argmax")
    p.add_argument("--freeze-scorer", action="store_true")
    p.add_argument("--cache-rewards", action="store_true",
                   help="memoize rewards (needs frozen scorer, greedy "
                        "generation, deterministic scoring)")
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--context-window", type=int, default=None)
    p.set_defaults(func=cmd_rl_finetune)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--word-vectors")
    p.add_argument("--dull-set")
    p.add_argument("--vocab", help="vocabulary file override")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--max-len", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("chat", help="interactive loop against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocabulary file override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--max-len", type=int, default=20)
    p.set_defaults(func=cmd_chat)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
