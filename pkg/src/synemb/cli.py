"""``synemb`` command line: BPE learning, training, fine-tuning, embedding, evaluation.

Exit codes: 0 success, 1 internal fault, 2 user or input error. Every command
that writes an artifact also writes ``<artifact>.manifest.json``; ``synemb
replay <manifest>`` re-runs the recorded command and checks the artifacts come
out byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np

from synemb import FormatError, SynEmbError, __version__
from synemb import bpe as bpe_mod
from synemb import evaluation as E
from synemb import model as M
from synemb import synthgen
from synemb import trainer as T
from synemb.corpus import (
    EvalSet, LanguageRegistry, build_eval_set, filter_examples, parse_conllu, parse_pairs_tsv,
    read_conllu, read_sentences_file, write_pairs_tsv,
)

log = logging.getLogger("synemb")


class UsageError(SynEmbError):
    pass


# ---------------------------------------------------------------- manifests

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, argv, args, inputs, outputs, started: float) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": json.loads(json.dumps(config, default=str)),
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
        "seed": getattr(args, "seed", None),
        "wall_time_s": round(time.time() - started, 3),
        "tool_version": __version__,
    }
    path = Path(str(out_path) + ".manifest.json")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


# ---------------------------------------------------------------- config files

def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys are flag names without dashes."""
    out = {}
    for lineno, raw in enumerate(_need_file(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: line {lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def apply_config_file(parser, args, argv) -> None:
    """Fill unset flags from ``--config``; a key also given on the command line with a different value is an error."""
    if not getattr(args, "config", None):
        return
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    actions = {a.dest: a for a in parser._actions}
    for key, raw in read_config_file(args.config).items():
        action = actions.get(key)
        if action is None or key in ("config", "command", "help"):
            raise UsageError(f"{args.config}: unknown config key {key!r}")
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            value = action.type(raw)
        else:
            value = raw
        if action.nargs in ("+", "*") or isinstance(action, argparse._AppendAction):
            value = raw.split()
        if any(g == flag for g in given):
            if getattr(args, key) != value:
                raise UsageError(f"conflicting settings: {flag} on the command line vs {key} in {args.config}")
            continue
        setattr(args, key, value)


# ---------------------------------------------------------------- shared helpers

MODEL_FLAGS = [f.name for f in fields(M.ModelConfig) if f.name not in ("bpe_vocab_size", "num_langs", "upos_tagset_size")]


def model_config_from_args(args, bpe_model, num_langs: int) -> M.ModelConfig:
    base = M.ModelConfig() if args.preset == "default" else M.toy_config()
    overrides = {k: getattr(args, k) for k in MODEL_FLAGS if getattr(args, k, None) is not None}
    return base.replace(bpe_vocab_size=bpe_model.vocab_size, num_langs=num_langs, **overrides)


def load_pairs(paths, registry, min_words: int | None):
    pairs = []
    for p in paths:
        pairs += parse_pairs_tsv(_need_file(p), registry)
    if min_words:
        before = len(pairs)
        pairs = filter_examples(pairs, min_words)
        log.info("kept %d of %d pairs after filtering", len(pairs), before)
    return pairs


def load_model(args):
    bpe_path = _need_file(args.bpe)
    bpe_model = bpe_mod.load_bpe(bpe_path)
    ckpt = T.load_checkpoint(_need_file(args.checkpoint), bpe_model)
    return ckpt, bpe_model, [bpe_path, Path(args.checkpoint)]


def embeddings_for(args, ids, texts, langs):
    """Vectors for the given sentences from ``--checkpoint`` or ``--embeddings``; returns (X, input paths)."""
    if bool(args.embeddings) == bool(args.checkpoint):
        raise UsageError("give exactly one of --embeddings and --checkpoint")
    if args.embeddings:
        rows = E.load_external_embeddings(_need_file(args.embeddings))
        return E.align_embeddings(rows, ids), [Path(args.embeddings)]
    if not args.bpe:
        raise UsageError("--checkpoint needs --bpe")
    ckpt, bpe_model, inputs = load_model(args)
    embs = M.embed_sentences(ckpt.params, ckpt.config, bpe_model, zip(texts, langs))
    return np.stack([e.vector for e in embs]), inputs


def _grammar(name_or_path: str) -> synthgen.ToyGrammar:
    if Path(name_or_path).is_file():
        return synthgen.ToyGrammar.load(name_or_path)
    try:
        return synthgen.builtin_grammar(name_or_path)
    except FileNotFoundError:
        raise UsageError(f"grammar {name_or_path!r} is neither a file nor a built-in grammar") from None


# ---------------------------------------------------------------- commands

def cmd_learn_bpe(args, argv, started):
    inputs = [_need_file(p) for p in args.input]
    registry = LanguageRegistry()
    texts = []
    for p in inputs:
        texts += [ex.src_text for ex in parse_pairs_tsv(p, registry)]
    model = bpe_mod.learn_bpe(texts, args.vocab_size)
    bpe_mod.save_bpe(model, args.out)
    write_manifest(args.out, argv, args, inputs, [args.out], started)
    print(f"learned {len(model.merges)} merges, vocab {model.vocab_size} -> {args.out}")


def cmd_train(args, argv, started):
    bpe_path = _need_file(args.bpe)
    bpe_model = bpe_mod.load_bpe(bpe_path)
    registry = LanguageRegistry()
    pairs = load_pairs(args.pairs, registry, args.min_words)
    if not pairs:
        raise UsageError("no training pairs left after filtering")
    config = model_config_from_args(args, bpe_model, len(registry))
    ckpt = T.Checkpoint.initial(config, registry, bpe_model, args.seed)
    tcfg = T.TrainConfig(
        batch_size=args.batch_size, lr=args.lr, max_steps=args.max_steps, eval_every=args.eval_every,
        log_every=args.log_every, seed=args.seed, clip_norm=args.clip_norm, shuffle=not args.no_shuffle,
        bucket_width=args.bucket_width, val_fraction=args.val_fraction,
    )
    progress_path = args.progress or str(args.out) + ".progress.jsonl"
    with open(progress_path, "w", encoding="utf-8") as sink:
        report = T.train(ckpt, tcfg, pairs, bpe_model, sink) if tcfg.max_steps else None
    T.save_checkpoint(ckpt, args.out)
    write_manifest(args.out, argv, args, [bpe_path] + [Path(p) for p in args.pairs], [args.out], started)
    if report is not None:
        print(f"trained {report.steps} steps: loss {report.final_loss:.4f}, tag accuracy {report.final_acc:.4f}")
    print(f"checkpoint -> {args.out}")


def cmd_finetune(args, argv, started):
    if args.epochs is not None and args.max_steps is not None:
        raise UsageError("conflicting settings: --epochs and --max-steps are mutually exclusive")
    ckpt, bpe_model, inputs = load_model(args)
    registry = ckpt.registry.copy()
    pairs = load_pairs(args.pairs, registry, args.min_words)
    if args.budget > len(pairs):
        log.warning("budget %d exceeds the %d available pairs; using all of them", args.budget, len(pairs))
    pairs = pairs[: args.budget]
    if args.max_steps is not None:
        steps = args.max_steps
    else:
        steps = math.ceil((args.epochs if args.epochs is not None else 1.0) * len(pairs) / args.batch_size)
    tcfg = T.TrainConfig(
        batch_size=args.batch_size, lr=args.lr, max_steps=steps, log_every=args.log_every, seed=args.seed,
        clip_norm=args.clip_norm, freeze_encoder=args.freeze_encoder, eval_every=0,
    )
    progress_path = args.progress or str(args.out) + ".progress.jsonl"
    with open(progress_path, "w", encoding="utf-8") as sink:
        new, report = T.finetune(ckpt, pairs, tcfg, bpe_model, sink)
    T.save_checkpoint(new, args.out)
    write_manifest(args.out, argv, args, inputs + [Path(p) for p in args.pairs], [args.out], started)
    print(f"fine-tuned {report.steps} steps on {len(pairs)} pairs -> {args.out}")


def cmd_embed(args, argv, started):
    ckpt, bpe_model, inputs = load_model(args)
    sentences = read_sentences_file(_need_file(args.sentences))
    embs = M.embed_sentences(ckpt.params, ckpt.config, bpe_model, [(s.text, s.lang) for s in sentences])
    ids = [s.id or str(i) for i, s in enumerate(sentences)]
    E.write_embeddings(args.out, ids, [e.vector for e in embs])
    write_manifest(args.out, argv, args, inputs + [Path(args.sentences)], [args.out], started)
    print(f"wrote {len(embs)} embeddings of dim {ckpt.config.enc_out_dim} -> {args.out}")


def _write_report(prefix, json_text: str, text: str):
    paths = []
    if prefix:
        for suffix, body in ((".json", json_text), (".txt", text)):
            p = Path(str(prefix) + suffix)
            p.write_text(body, encoding="utf-8")
            paths.append(p)
    return paths


def cmd_eval_nn(args, argv, started):
    eval_set = EvalSet.from_jsonl(_need_file(args.eval_set))
    ks = args.k or [1, 5]
    X, inputs = embeddings_for(
        args, eval_set.ids(), [s.text for s in eval_set.sentences], [s.lang for s in eval_set.sentences]
    )
    report = E.neighbour_report(eval_set, X, ks)
    text = report.to_text()
    sys.stdout.write(text)
    outputs = _write_report(args.out, report.to_json() + "\n", text)
    if args.out:
        write_manifest(args.out, argv, args, [Path(args.eval_set)] + inputs, outputs, started)


def cmd_eval_fd(args, argv, started):
    results = {}
    inputs = []
    for path in args.conllu:
        sentences = parse_conllu(_need_file(path), args.lang)
        if len(sentences) < 2:
            raise UsageError(f"{path}: need at least 2 sentences, found {len(sentences)}")
        ids = [s.id or str(i) for i, s in enumerate(sentences)]
        X, used = embeddings_for(args, ids, [s.text for s in sentences], [s.lang for s in sentences])
        score = E.functional_dissimilarity([s.upos for s in sentences], X, args.fd_convention)
        results[str(path)] = {"lang": args.lang, "n": len(sentences), "score": score}
        inputs += [Path(path)] + used
    text = "".join(f"{v['lang']:<6}{v['n']:>8}{v['score']:>10.4f}  {k}\n" for k, v in results.items())
    sys.stdout.write(text)
    body = json.dumps({"convention": args.fd_convention, "results": results}, indent=2, sort_keys=True) + "\n"
    outputs = _write_report(args.out, body, text)
    if args.out:
        write_manifest(args.out, argv, args, list(dict.fromkeys(inputs)), outputs, started)


def cmd_build_eval_set(args, argv, started):
    sentences = []
    for path in args.conllu:
        got, _ = read_conllu(_need_file(path), args.lang)
        sentences += got
    eval_set = build_eval_set(sentences, args.min_group_size, args.sample_groups, args.seed)
    eval_set.to_jsonl(args.out)
    write_manifest(args.out, argv, args, [Path(p) for p in args.conllu], [args.out], started)
    print(f"{len(eval_set)} sentences in {eval_set.num_groups} groups -> {args.out}")


def cmd_generate(args, argv, started):
    grammar = _grammar(args.grammar)
    pairs = synthgen.generate_pairs(grammar, args.src, args.tgt, args.count, args.seed)
    write_pairs_tsv(pairs, args.out)
    inputs = [Path(args.grammar)] if Path(args.grammar).is_file() else []
    write_manifest(args.out, argv, args, inputs, [args.out], started)
    print(f"{len(pairs)} pairs -> {args.out}")


def cmd_generate_eval(args, argv, started):
    grammar = _grammar(args.grammar)
    exclude = set()
    for p in args.exclude or ():
        exclude |= {ex.src_text for ex in parse_pairs_tsv(_need_file(p), LanguageRegistry())}
    eval_set = synthgen.generate_eval_set(grammar, args.lang, args.groups, args.per_group, args.seed, exclude)
    eval_set.to_jsonl(args.out)
    inputs = ([Path(args.grammar)] if Path(args.grammar).is_file() else []) + [Path(p) for p in args.exclude or ()]
    write_manifest(args.out, argv, args, inputs, [args.out], started)
    print(f"{len(eval_set)} sentences in {eval_set.num_groups} groups -> {args.out}")


def cmd_replay(args, argv, started):
    manifest = json.loads(_need_file(args.manifest).read_text(encoding="utf-8"))
    for path, digest in manifest["inputs"].items():
        if not Path(path).is_file() or file_sha256(path) != digest:
            raise UsageError(f"input {path} is missing or changed since the manifest was written")
    code = main(manifest["argv"])
    if code != 0:
        return code
    mismatched = [p for p, d in manifest["outputs"].items() if file_sha256(p) != d]
    if mismatched:
        print(f"replay produced different artifacts: {mismatched}", file=sys.stderr)
        return 1
    print(f"replayed {manifest['command']}: {len(manifest['outputs'])} artifact(s) identical")
    return 0


# ---------------------------------------------------------------- parser

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synemb", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"synemb {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-bpe", help="learn a joint BPE vocabulary from pair files")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_learn_bpe)

    p = sub.add_parser("train", help="train an encoder-decoder from scratch")
    p.add_argument("--pairs", nargs="+", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file mirroring these flags")
    p.add_argument("--preset", choices=("default", "toy"), default="default")
    for name in MODEL_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), type=float if name == "dropout" else int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--bucket-width", type=int, default=4)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--min-words", type=int, default=3, help="0 disables pair filtering")
    p.add_argument("--progress", help="JSON-lines progress log (default <out>.progress.jsonl)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training on new (e.g. low-resource source) pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--pairs", nargs="+", required=True)
    p.add_argument("--budget", type=int, required=True, help="use the first N pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=float, default=None, help="passes over the budget (default 1)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--min-words", type=int, default=3)
    p.add_argument("--progress")
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="write sentence embeddings in the external embedding format")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--sentences", required=True, help="EvalSet JSON lines or id<TAB>lang<TAB>text rows")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    for name, func, help_ in (
        ("eval-nn", cmd_eval_nn, "k-NN group accuracy on an EvalSet"),
        ("eval-fd", cmd_eval_fd, "functional dissimilarity on CoNLL-U sentences"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--embeddings")
        p.add_argument("--checkpoint")
        p.add_argument("--bpe")
        p.add_argument("--out", help="report prefix; writes <out>.json and <out>.txt")
        if name == "eval-nn":
            p.add_argument("--eval-set", required=True)
            p.add_argument("--k", type=int, action="append")
        else:
            p.add_argument("--conllu", nargs="+", required=True)
            p.add_argument("--lang", required=True)
            p.add_argument("--fd-convention", choices=E.FD_CONVENTIONS, default="similarity")
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("build-eval-set", help="group CoNLL-U sentences by UPOS sequence")
    p.add_argument("--conllu", nargs="+", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--min-group-size", type=int, default=6)
    p.add_argument("--sample-groups", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_eval_set)

    p = sub.add_parser("generate", help="synthetic parallel pairs from a toy grammar")
    p.add_argument("--grammar", default="toy")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("generate-eval", help="synthetic EvalSet from a toy grammar")
    p.add_argument("--grammar", default="toy")
    p.add_argument("--lang", required=True)
    p.add_argument("--groups", type=int, default=12)
    p.add_argument("--per-group", type=int, default=8)
    p.add_argument("--exclude", nargs="*", help="pair files whose source sentences must not appear")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_generate_eval)

    p = sub.add_parser("replay", help="re-run a manifest and verify identical artifacts")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        if args.command == "train":
            apply_config_file(parser._subparsers._group_actions[0].choices["train"], args, argv)
        limits = None
        if getattr(args, "threads", None):
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(args.threads)
        try:
            code = args.func(args, argv, started)
        finally:
            if limits is not None:
                limits.unregister()
        return int(code or 0)
    except (SynEmbError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
