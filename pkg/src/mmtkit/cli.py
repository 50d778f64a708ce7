"""Command-line entry point.

One executable, `mmtkit`, with subcommands covering the pipeline in
order: corpus statistics, subword learning and application, training,
translation, evaluation, and synthetic feature-file generation.
Training options live in a plain "key = value" config file (# starts a
comment); command-line flags override file values, and unknown keys are
rejected.  Usage mistakes exit 2; runtime failures exit 1 with a
one-line diagnostic.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import corpus, features, inference, metrics, subword, trainer
from .model import ModelConfig, init_params
from .trainer import EncodedExample, TrainConfig


class UsageError(Exception):
    """Flag or config combination that cannot be executed."""


MODEL_KEYS = ("emb_size", "hidden_size", "n_layers", "n_regions", "visual_dim")
TRAIN_KEYS = ("batch_size", "max_epochs", "max_len", "lr", "beta1", "beta2",
              "eps", "seed", "mode", "clip_norm")
SHARED_KEYS = ("dropout",)
KNOWN_KEYS = frozenset(MODEL_KEYS + TRAIN_KEYS + SHARED_KEYS)


def parse_config(path) -> dict[str, str]:
    """Read "key = value" lines; unknown keys are rejected."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in KNOWN_KEYS:
                raise UsageError(f"{path}: line {lineno}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fp:
        text = fp.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for line in lines:
            fp.write(line + "\n")


def _load_examples(tsv, pairs, src, tgt):
    """Examples from whichever corpus flag was given; None when none was."""
    given = [p for p in (tsv, pairs, src) if p]
    if len(given) > 1:
        raise UsageError("give at most one of --tsv / --pairs / --src")
    if tsv:
        return corpus.load_multimodal_tsv(tsv)
    if pairs:
        examples, _ = corpus.load_parallel(pairs)
        return examples
    if src:
        if not tgt:
            raise UsageError("--src needs --tgt")
        examples, _ = corpus.load_parallel(src, tgt)
        return examples
    return None


def cmd_stats(args) -> int:
    examples = _load_examples(args.tsv, args.pairs, args.src, args.tgt)
    if examples is None:
        raise UsageError("give one of --tsv / --pairs / --src with --tgt")
    stats = corpus.compute_stats(examples)
    name = args.tsv or args.pairs or args.src
    print(corpus.format_stats_table(stats, name=str(name)))
    print(corpus.format_stats_kv(stats))
    return 0


def _sentences_for_bpe(args):
    sentences: list[list[str]] = []
    for path in args.input or []:
        for line in _read_lines(path):
            tokens = corpus.normalize_text(line)
            if tokens:
                sentences.append(tokens)
    for path in args.tsv or []:
        for ex in corpus.load_multimodal_tsv(path):
            sentences.append(ex.src_text.split())
            sentences.append(ex.tgt_text.split())
    for path in args.pairs or []:
        examples, _ = corpus.load_parallel(path)
        for ex in examples:
            sentences.append(ex.src_text.split())
            sentences.append(ex.tgt_text.split())
    return sentences


def cmd_bpe_learn(args) -> int:
    sentences = _sentences_for_bpe(args)
    if not sentences:
        raise UsageError("no input: give --input, --tsv, or --pairs files")
    model = subword.learn_bpe(sentences, args.merges)
    subword.save_bpe_model(args.out, model)
    print(f"learned {len(model.merges)} merges from {len(sentences)} sentences -> {args.out}")
    return 0


def cmd_bpe_apply(args) -> int:
    model = subword.load_bpe_model(args.model)
    encode = subword.bpe_encoder(model)
    out = [" ".join(encode(corpus.normalize_text(line)))
           for line in _read_lines(args.input)]
    _write_lines(args.output, out)
    return 0


def _encode_side(bpe_encode, vocab, text: str) -> list[int]:
    return vocab.encode(bpe_encode(text.split()))


def _encode_examples(examples, bpe_encode, src_vocab, tgt_vocab,
                     with_keys: bool) -> list[EncodedExample]:
    encoded = []
    for i, ex in enumerate(examples):
        key = None
        if with_keys:
            key = features.feature_key(i, ex.image_id)
        encoded.append(EncodedExample(
            src=_encode_side(bpe_encode, src_vocab, ex.src_text),
            tgt=_encode_side(bpe_encode, tgt_vocab, ex.tgt_text),
            feature_key=key))
    return encoded


def cmd_train(args) -> int:
    cfg_kv = parse_config(args.config)
    overrides = {
        "seed": args.seed, "mode": args.mode, "lr": args.lr,
        "batch_size": args.batch_size, "max_epochs": args.max_epochs,
        "max_len": args.max_len, "clip_norm": args.clip_norm,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg_kv[key] = str(value)

    defaults = TrainConfig()
    train_cfg = TrainConfig(
        batch_size=int(cfg_kv.get("batch_size", defaults.batch_size)),
        max_epochs=int(cfg_kv.get("max_epochs", defaults.max_epochs)),
        max_len=int(cfg_kv.get("max_len", defaults.max_len)),
        lr=float(cfg_kv.get("lr", defaults.lr)),
        beta1=float(cfg_kv.get("beta1", defaults.beta1)),
        beta2=float(cfg_kv.get("beta2", defaults.beta2)),
        eps=float(cfg_kv.get("eps", defaults.eps)),
        dropout=float(cfg_kv.get("dropout", defaults.dropout)),
        seed=int(cfg_kv.get("seed", defaults.seed)),
        mode=cfg_kv.get("mode", defaults.mode),
        clip_norm=float(cfg_kv["clip_norm"]) if "clip_norm" in cfg_kv else None,
    )
    multimodal = train_cfg.mode != "pretrain"

    train_examples = _load_examples(args.train_tsv, args.train_pairs, None, None)
    valid_examples = _load_examples(args.valid_tsv, args.valid_pairs, None, None)
    if train_examples is None:
        raise UsageError("give --train-tsv or --train-pairs")
    if valid_examples is None:
        raise UsageError("give --valid-tsv or --valid-pairs")
    if multimodal and (args.train_tsv is None or args.valid_tsv is None):
        raise UsageError(f"{train_cfg.mode} mode needs --train-tsv and --valid-tsv "
                         "(feature keys come from TSV rows)")

    store = valid_store = None
    if multimodal:
        if not args.features or not args.valid_features:
            raise UsageError(f"{train_cfg.mode} mode needs --features and --valid-features")
        store = features.read_features(args.features)
        valid_store = features.read_features(args.valid_features)
        if (valid_store.n_regions, valid_store.dim) != (store.n_regions, store.dim):
            raise UsageError("train and valid feature files disagree on L or D")
    elif args.features or args.valid_features:
        raise UsageError("pretrain mode is text-only; drop --features")

    if train_cfg.mode == "finetune" and not args.init_from:
        raise UsageError("finetune mode needs --init-from CHECKPOINT")
    if train_cfg.mode != "finetune" and args.init_from:
        raise UsageError("--init-from is only valid in finetune mode")

    bpe_model = subword.load_bpe_model(args.bpe_model)
    bpe_encode = subword.bpe_encoder(bpe_model)

    os.makedirs(args.out_dir, exist_ok=True)
    if args.src_vocab and args.tgt_vocab:
        src_vocab = subword.load_vocab(args.src_vocab)
        tgt_vocab = subword.load_vocab(args.tgt_vocab)
    elif args.src_vocab or args.tgt_vocab:
        raise UsageError("give both --src-vocab and --tgt-vocab or neither")
    elif train_cfg.mode == "finetune":
        raise UsageError("finetune mode needs the base run's --src-vocab and --tgt-vocab")
    else:
        src_vocab = subword.build_vocab(
            bpe_encode(ex.src_text.split()) for ex in train_examples)
        tgt_vocab = subword.build_vocab(
            bpe_encode(ex.tgt_text.split()) for ex in train_examples)
        subword.save_vocab(os.path.join(args.out_dir, "src_vocab.txt"), src_vocab)
        subword.save_vocab(os.path.join(args.out_dir, "tgt_vocab.txt"), tgt_vocab)

    train_data = _encode_examples(train_examples, bpe_encode, src_vocab, tgt_vocab, multimodal)
    valid_data = _encode_examples(valid_examples, bpe_encode, src_vocab, tgt_vocab, multimodal)

    model_cfg = ModelConfig(
        src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab),
        emb_size=int(cfg_kv.get("emb_size", 500)),
        hidden_size=int(cfg_kv.get("hidden_size", 500)),
        n_layers=int(cfg_kv.get("n_layers", 2)),
        n_regions=store.n_regions if store else int(cfg_kv.get("n_regions", 49)),
        visual_dim=store.dim if store else int(cfg_kv.get("visual_dim", 512)),
        dropout=train_cfg.dropout,
    )

    if args.init_from:
        ckpt = trainer.load_checkpoint(args.init_from)
        base_cfg = ckpt.model_cfg
        for field_name in ("src_vocab", "tgt_vocab", "emb_size", "hidden_size",
                           "n_layers", "n_regions", "visual_dim"):
            ours, theirs = getattr(model_cfg, field_name), getattr(base_cfg, field_name)
            if ours != theirs:
                raise ValueError(
                    f"checkpoint {args.init_from} has {field_name}={theirs}, "
                    f"this run implies {ours}")
        params = trainer.params_from_checkpoint(ckpt)
    else:
        params = init_params(model_cfg, train_cfg.seed)

    best, _history = trainer.train(train_cfg, model_cfg, params, train_data,
                                   valid_data, store, valid_store, log=print)
    out_path = os.path.join(args.out_dir, "model.ckpt")
    trainer.save_checkpoint(out_path, best)
    print(f"best epoch={best.epoch} valid_ppl={best.valid_ppl:.6f}")
    print(f"saved {out_path}")
    return 0


def cmd_translate(args) -> int:
    if len(args.model) > 2:
        raise UsageError("at most two --model flags")
    if bool(args.src) == bool(args.tsv):
        raise UsageError("give exactly one of --src / --tsv")
    if args.features and not args.tsv:
        raise UsageError("--features needs --tsv (keys come from TSV rows)")

    models = []
    for path in args.model:
        ckpt = trainer.load_checkpoint(path)
        models.append((trainer.params_from_checkpoint(ckpt), ckpt.model_cfg))
    bpe_model = subword.load_bpe_model(args.bpe_model)
    src_vocab = subword.load_vocab(args.src_vocab)
    tgt_vocab = subword.load_vocab(args.tgt_vocab)

    store = feature_keys = None
    if args.tsv:
        examples = corpus.load_multimodal_tsv(args.tsv)
        src_lines = [ex.src_text for ex in examples]
        if args.features:
            store = features.read_features(args.features)
            feature_keys = [features.feature_key(i, ex.image_id)
                            for i, ex in enumerate(examples)]
    else:
        src_lines = _read_lines(args.src)

    out_lines, sidecar = inference.translate_corpus(
        models, bpe_model, src_vocab, tgt_vocab, src_lines, store, feature_keys,
        beam_width=args.beam, max_len=args.max_len,
        length_normalize=args.length_normalize)
    _write_lines(args.out, out_lines)
    sidecar_path = args.sidecar or (args.out + ".scores")
    _write_lines(sidecar_path, inference.format_sidecar(sidecar).split("\n") if sidecar else [])
    print(f"translated {len(out_lines)} lines -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if bool(args.ref) == bool(args.ref_tsv):
        raise UsageError("give exactly one of --ref / --ref-tsv")
    hyps = [corpus.normalize_text(line) for line in _read_lines(args.hyp)]
    if args.ref:
        refs = [corpus.normalize_text(line) for line in _read_lines(args.ref)]
    else:
        refs = [ex.tgt_text.split() for ex in corpus.load_multimodal_tsv(args.ref_tsv)]
    bleu = metrics.corpus_bleu(hyps, refs)
    rib = metrics.corpus_ribes(hyps, refs)
    print(metrics.format_bleu(bleu))
    print(metrics.format_ribes(rib))
    for line in metrics.bleu_kv(bleu):
        print(line)
    print(f"ribes={rib.ribes:.6f}")
    if args.sentence:
        for i, score in enumerate(rib.sentence_scores):
            print(f"sentence={i}\tribes={score:.6f}")
    return 0


def cmd_gen_features_fixture(args) -> int:
    examples = corpus.load_multimodal_tsv(args.tsv)
    keys = [features.feature_key(i, ex.image_id) for i, ex in enumerate(examples)]
    records = features.synthetic_features(keys, args.regions, args.dim, args.seed)
    count = features.write_features(args.out, records, args.regions, args.dim)
    print(f"wrote {count} records (L={args.regions}, D={args.dim}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtkit",
        description="English-Hindi multimodal translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("stats", formatter_class=fmt,
                       help="corpus split statistics")
    p.add_argument("--tsv", help="7-column multimodal TSV")
    p.add_argument("--pairs", help="2-column parallel TSV")
    p.add_argument("--src", help="source-side text file (with --tgt)")
    p.add_argument("--tgt", help="target-side text file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bpe-learn", formatter_class=fmt,
                       help="learn joint subword merges")
    p.add_argument("--input", action="append", help="plain text file (repeatable)")
    p.add_argument("--tsv", action="append", help="7-column TSV, both text sides (repeatable)")
    p.add_argument("--pairs", action="append", help="2-column parallel TSV (repeatable)")
    p.add_argument("--merges", type=int, required=True, help="number of merges to learn")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", formatter_class=fmt,
                       help="segment a text file with a learned model")
    p.add_argument("--model", required=True, help="merge model file")
    p.add_argument("--input", required=True, help="text file, one sentence per line")
    p.add_argument("--output", required=True, help="segmented output file")
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("train", formatter_class=fmt, help="train a model")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--train-tsv", help="training split, 7-column TSV")
    p.add_argument("--train-pairs", help="training split, 2-column TSV")
    p.add_argument("--valid-tsv", help="validation split, 7-column TSV")
    p.add_argument("--valid-pairs", help="validation split, 2-column TSV")
    p.add_argument("--bpe-model", required=True, help="learned merge model")
    p.add_argument("--out-dir", required=True, help="directory for checkpoint and vocabularies")
    p.add_argument("--features", help="training feature file (multimodal modes)")
    p.add_argument("--valid-features", help="validation feature file")
    p.add_argument("--init-from", help="checkpoint to continue from (finetune)")
    p.add_argument("--src-vocab", help="reuse an existing source vocabulary")
    p.add_argument("--tgt-vocab", help="reuse an existing target vocabulary")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--mode", choices=trainer.MODES, help="override config mode")
    p.add_argument("--lr", type=float, help="override config learning rate")
    p.add_argument("--batch-size", type=int, help="override config batch size")
    p.add_argument("--max-epochs", type=int, help="override config epoch cap")
    p.add_argument("--max-len", type=int, help="override config length cap")
    p.add_argument("--clip-norm", type=float, help="gradient-norm clip (off by default)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker-thread cap (reserved; pipeline is single-threaded)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", formatter_class=fmt,
                       help="decode a corpus with one or two models")
    p.add_argument("--model", action="append", required=True,
                   help="checkpoint (repeat for the two-model rule)")
    p.add_argument("--bpe-model", required=True, help="learned merge model")
    p.add_argument("--src-vocab", required=True, help="source vocabulary file")
    p.add_argument("--tgt-vocab", required=True, help="target vocabulary file")
    p.add_argument("--src", help="plain source text, one sentence per line")
    p.add_argument("--tsv", help="7-column TSV (source column is translated)")
    p.add_argument("--features", help="feature file matching --tsv rows")
    p.add_argument("--out", required=True, help="output translation file")
    p.add_argument("--sidecar", help="score sidecar path (default: OUT.scores)")
    p.add_argument("--beam", type=int, default=5, help="beam width")
    p.add_argument("--max-len", type=int, default=50, help="decode length cap")
    p.add_argument("--length-normalize", action="store_true",
                   help="rank hypotheses by length-normalized score")
    p.add_argument("--threads", type=int, default=1,
                   help="worker-thread cap (reserved; pipeline is single-threaded)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="score translations against references")
    p.add_argument("--hyp", required=True, help="hypothesis file, one sentence per line")
    p.add_argument("--ref", help="reference file, one sentence per line")
    p.add_argument("--ref-tsv", help="7-column TSV, target column as reference")
    p.add_argument("--sentence", action="store_true", help="print per-sentence scores")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-features-fixture", formatter_class=fmt,
                       help="write a seeded synthetic feature file for a TSV")
    p.add_argument("--tsv", required=True, help="7-column multimodal TSV")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--regions", type=int, default=49, help="regions per record")
    p.add_argument("--dim", type=int, default=512, help="dims per region")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_gen_features_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, IndexError, FloatingPointError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
