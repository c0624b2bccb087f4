"""Command-line pipeline: subwording, factor alignment, training, decoding,
scoring. Every subcommand writes its artifact plus a manifest recording the
expanded config, its hash, the seed, and input checksums, so a run can be
reproduced byte-for-byte (manifests differ only in their timestamp).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import bleu as bleu_mod
from . import bpe as bpe_mod
from . import checks
from . import factors as factors_mod
from .bpe import BpeModel, Vocabulary, read_corpus, write_corpus
from .config import (
    PRESETS,
    RunConfig,
    expand_config,
    format_config,
    parse_factor_dims,
    read_config_file,
)
from .decoding import translate_corpus
from .factors import AlignmentStrategy, FactoredCorpus
from .model import CheckpointError, ConfigError, Transformer, load_checkpoint
from .training import build_vocabularies, train

USER_ERRORS = (
    ConfigError,
    CheckpointError,
    bpe_mod.DataError,
    factors_mod.FactorError,
    ValueError,
    FileNotFoundError,
)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    target: Path,
    command: str,
    config: dict,
    seed: Optional[int],
    inputs: List[Path],
    outputs: List[Path],
    extra: Optional[dict] = None,
) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode("utf-8")
        ).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_path(out: Path) -> Path:
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _parse_factor_args(pairs: Optional[List[str]]) -> Dict[str, str]:
    """Repeatable ``name=path`` flags, order-preserving."""
    out: Dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--factors expects name=path, got {pair!r}")
        name, path = pair.split("=", 1)
        if name in out:
            raise ConfigError(f"duplicate factor name {name!r}")
        out[name] = path
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter set")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--arch", choices=["1enc", "nenc"], dest="arch")
    g.add_argument("--combine", choices=["sum", "concat"], dest="combine")
    g.add_argument("--factor-dims", action="append", default=None, metavar="NAME=INT",
                   help="per-factor embedding size (repeatable)")
    g.add_argument("--layers-enc", type=int, dest="layers_enc")
    g.add_argument("--layers-dec", type=int, dest="layers_dec")
    g.add_argument("--heads", type=int)
    g.add_argument("--d-model", type=int, dest="d_model")
    g.add_argument("--d-ffn", type=int, dest="d_ffn")
    g.add_argument("--dropout", type=float)
    g.add_argument("--max-len", type=int, dest="max_len")
    g.add_argument("--token-batch", type=int, dest="token_batch")
    g.add_argument("--label-smoothing", type=float, dest="label_smoothing")
    g.add_argument("--lr", type=float)
    g.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    g.add_argument("--max-steps", type=int, dest="max_steps")
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-every", type=int, dest="eval_every")
    g.add_argument("--vocab-threshold", type=int, dest="vocab_threshold")
    g.add_argument("--beam", type=int)
    g.add_argument("--no-length-penalty", action="store_true")


def _run_config(args: argparse.Namespace) -> RunConfig:
    flag_fields = [
        "arch", "combine", "layers_enc", "layers_dec", "heads", "d_model", "d_ffn",
        "dropout", "max_len", "token_batch", "label_smoothing", "lr", "warmup_steps",
        "max_steps", "seed", "eval_every", "vocab_threshold", "beam",
    ]
    flags: Dict[str, object] = {
        k: getattr(args, k) for k in flag_fields if getattr(args, k, None) is not None
    }
    if getattr(args, "factor_dims", None):
        dims: Dict[str, int] = {}
        for chunk in args.factor_dims:
            dims.update(parse_factor_dims(chunk))
        flags["factor_dims"] = dims
    if getattr(args, "no_length_penalty", False):
        flags["length_penalty"] = False
    file_values = read_config_file(args.config) if getattr(args, "config", None) else None
    return expand_config(getattr(args, "preset", None), file_values, flags)


def _load_factored_corpus(corpus_path: str, factor_paths: Dict[str, str]) -> FactoredCorpus:
    words = read_corpus(corpus_path)
    streams = {name: factors_mod.read_factor_file(path) for name, path in factor_paths.items()}
    return FactoredCorpus(words=words, factors=streams)


# -- subcommands ---------------------------------------------------------------


def cmd_learn_bpe(args) -> int:
    sentences = list(itertools.chain.from_iterable(read_corpus(p) for p in args.corpus))
    model = bpe_mod.learn_bpe(
        sentences,
        args.num_merges,
        marker=args.marker,
        vocab_threshold=args.vocab_threshold or 0,
    )
    merges_path = Path(args.merges)
    model.save(merges_path)
    outputs = [merges_path]
    if args.vocab:
        vocab = bpe_mod.build_vocab(
            itertools.chain.from_iterable(read_corpus(p) for p in args.corpus), model
        )
        vocab.save(args.vocab)
        outputs.append(Path(args.vocab))
    _write_manifest(
        _manifest_path(merges_path), "learn-bpe",
        {"num_merges": args.num_merges, "vocab_threshold": args.vocab_threshold or 0},
        None, [Path(p) for p in args.corpus], outputs,
    )
    print(f"learned {len(model.merges)} merges -> {merges_path}")
    return 0


def cmd_apply_bpe(args) -> int:
    model = BpeModel.load(args.merges, vocab_threshold=args.vocab_threshold or 0)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    sentences = read_corpus(args.corpus)
    out_path = Path(args.out)
    write_corpus(out_path, (bpe_mod.apply_bpe(s, model, vocab) for s in sentences))
    inputs = [Path(args.corpus), Path(args.merges)] + ([Path(args.vocab)] if args.vocab else [])
    _write_manifest(_manifest_path(out_path), "apply-bpe", {"marker": model.marker}, None,
                    inputs, [out_path])
    print(f"wrote subword corpus -> {out_path}")
    return 0


def cmd_ingest_tags(args) -> int:
    corpus = read_corpus(args.corpus) if args.corpus else None
    tagged = factors_mod.ingest_tagged(args.tagged, corpus)
    streams = factors_mod.factor_streams(tagged)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, stream in streams.items():
        path = out_dir / f"{name}.txt"
        factors_mod.write_factor_file(path, stream)
        outputs.append(path)
    inputs = [Path(args.tagged)] + ([Path(args.corpus)] if args.corpus else [])
    _write_manifest(out_dir / "manifest.json", "ingest-tags", {}, None, inputs, outputs)
    print(f"extracted {len(streams)} factor streams over {len(tagged)} sentences -> {out_dir}")
    return 0


def cmd_chunk(args) -> int:
    with open(args.corpus, encoding="utf-8") as fh:
        sentences = [line.rstrip("\n") for line in fh]
    chunks = factors_mod.chunk_corpus(sentences, args.max_chars)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, chunk in enumerate(chunks):
        path = out_dir / f"chunk_{i:04d}.txt"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(chunk) + "\n")
        outputs.append(path)
    _write_manifest(out_dir / "manifest.json", "chunk", {"max_chars": args.max_chars},
                    None, [Path(args.corpus)], outputs)
    print(f"split {len(sentences)} sentences into {len(chunks)} chunks -> {out_dir}")
    return 0


def cmd_resolve_synsets(args) -> int:
    tagged = factors_mod.parse_tagged(args.tagged)
    spans_by_sentence = factors_mod.read_span_file(args.spans)
    streams = []
    for i, sentence in enumerate(tagged):
        streams.append(factors_mod.resolve_synsets(sentence, spans_by_sentence.get(i, [])))
    out_path = Path(args.out)
    factors_mod.write_factor_file(out_path, streams)
    _write_manifest(_manifest_path(out_path), "resolve-synsets", {}, None,
                    [Path(args.tagged), Path(args.spans)], [out_path])
    print(f"resolved synsets for {len(streams)} sentences -> {out_path}")
    return 0


def cmd_align(args) -> int:
    strategy = AlignmentStrategy(args.strategy)
    model = BpeModel.load(args.merges)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    words = read_corpus(args.corpus)
    factor_paths = _parse_factor_args(args.factors)
    if not factor_paths:
        raise ConfigError("align requires at least one --factors name=path")

    subword_sentences = [bpe_mod.apply_bpe(s, model, vocab) for s in words]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    aligned_streams: Dict[str, List[List[str]]] = {name: [] for name in factor_paths}
    tag_stream: List[List[str]] = []
    for name, path in factor_paths.items():
        values = factors_mod.read_factor_file(path)
        if len(values) != len(words):
            raise factors_mod.FactorError(
                f"factor {name!r} has {len(values)} sentences, corpus has {len(words)}"
            )
        for i, (w, v, sw) in enumerate(zip(words, values, subword_sentences)):
            try:
                streams = factors_mod.align_to_subwords(w, v, sw, strategy, model.marker)
            except factors_mod.FactorError as exc:
                raise factors_mod.FactorError(f"sentence {i}: {exc}") from exc
            aligned_streams[name].append(streams[0])
            if strategy is AlignmentStrategy.SUBWORD_TAGS and name == next(iter(factor_paths)):
                tag_stream.append(streams[1])

    for name, stream in aligned_streams.items():
        path = out_dir / f"{name}.txt"
        factors_mod.write_factor_file(path, stream)
        outputs.append(path)
    if strategy is AlignmentStrategy.SUBWORD_TAGS:
        path = out_dir / f"{factors_mod.SUBWORD_TAG_FACTOR}.txt"
        factors_mod.write_factor_file(path, tag_stream)
        outputs.append(path)

    inputs = [Path(args.corpus), Path(args.merges)] + [Path(p) for p in factor_paths.values()]
    if args.vocab:
        inputs.append(Path(args.vocab))
    _write_manifest(out_dir / "manifest.json", "align", {"strategy": strategy.value},
                    None, inputs, outputs)
    print(f"aligned {len(factor_paths)} factor(s) with strategy {strategy.value} -> {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    factor_paths = _parse_factor_args(args.factors)
    corpus = _load_factored_corpus(args.corpus, factor_paths)
    targets = read_corpus(args.target)
    src_vocabs, tgt_vocab = build_vocabularies(corpus, targets, threshold=cfg.vocab_threshold)
    sizes = {name: len(v) for name, v in src_vocabs.items()}
    model_cfg = cfg.model_config(sizes, len(tgt_vocab))

    if args.dry_run:
        print(format_config(cfg))
        print(f"decoder_dim = {model_cfg.decoder_dim}")
        for spec in model_cfg.factors:
            print(f"factor {spec.name}: vocab={spec.vocab_size} dim={spec.embed_dim}")
        return 0

    val_corpus = val_targets = None
    if args.val_corpus and args.val_target:
        val_factor_paths = _parse_factor_args(args.val_factors)
        if set(val_factor_paths) != set(factor_paths):
            raise ConfigError("validation factors must match training factors")
        val_corpus = _load_factored_corpus(args.val_corpus, val_factor_paths)
        val_targets = read_corpus(args.val_target)

    model = Transformer(model_cfg, seed=cfg.seed)
    out_dir = Path(args.out)
    result = train(
        model, corpus, targets, src_vocabs, tgt_vocab, cfg.train_config(),
        val_corpus=val_corpus, val_targets=val_targets, out_dir=out_dir,
    )
    inputs = [Path(args.corpus), Path(args.target)] + [Path(p) for p in factor_paths.values()]
    outputs = [result.final_path, result.best_path, out_dir / "metrics.tsv"]
    _write_manifest(
        out_dir / "manifest.json", "train", cfg.to_dict(), cfg.seed, inputs,
        sorted(set(outputs)),
        extra={"model_config": model_cfg.to_dict(),
               "checkpoint_hash": _sha256(result.final_path)},
    )
    last = result.metrics[-1] if result.metrics else None
    loss_txt = f", final train loss {last.train_loss:.4f}" if last else ""
    print(f"trained {result.steps} steps{loss_txt} -> {out_dir}")
    return 0


def cmd_translate(args) -> int:
    model, src_vocabs, tgt_vocab = load_checkpoint(args.checkpoint)
    if src_vocabs is None or tgt_vocab is None:
        raise CheckpointError("checkpoint carries no vocabularies; cannot translate")
    cfg = _run_config(args)
    factor_paths = _parse_factor_args(args.factors)
    corpus = _load_factored_corpus(args.corpus, factor_paths)
    streams = {"words": corpus.words, **corpus.factors}
    expected = {f.name for f in model.config.factors}
    if set(streams) != expected:
        raise ConfigError(
            f"model expects factor streams {sorted(expected)}, got {sorted(streams)}"
        )
    hyps = translate_corpus(
        model, streams, src_vocabs, tgt_vocab,
        beam_size=cfg.beam, max_len=args.max_len, length_penalty=cfg.length_penalty,
    )
    if not args.keep_bpe:
        hyps = [bpe_mod.strip_bpe(h) for h in hyps]
    out_path = Path(args.out)
    write_corpus(out_path, hyps)
    inputs = [Path(args.checkpoint), Path(args.corpus)] + [Path(p) for p in factor_paths.values()]
    _write_manifest(_manifest_path(out_path), "translate",
                    {"beam": cfg.beam, "length_penalty": cfg.length_penalty},
                    cfg.seed, inputs, [out_path])
    print(f"translated {len(hyps)} sentences -> {out_path}")
    return 0


def cmd_score_bleu(args) -> int:
    hyps = read_corpus(args.hyp)
    refs = read_corpus(args.ref)
    result = bleu_mod.corpus_bleu(hyps, refs)
    print(result.format())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(result.format() + "\n")
    return 0


def cmd_grad_check(args) -> int:
    ok = True
    for name, report in checks.op_grad_checks(seed=args.seed or 0).items():
        print(f"[{'PASS' if report.passed else 'FAIL'}] op {name}: "
              f"max rel err {report.max_rel_error:.3e}")
        ok = ok and report.passed
    variants = checks.all_variants() if not args.arch else [(args.arch, args.combine or "sum")]
    for arch, comb in variants:
        report = checks.model_loss_grad_check(arch, comb, seed=args.seed or 0)
        print(f"[{'PASS' if report.passed else 'FAIL'}] model {arch}+{comb}: "
              f"max rel err {report.max_rel_error:.3e}")
        ok = ok and report.passed
    return 0 if ok else 1


def cmd_show_config(args) -> int:
    cfg = _run_config(args)
    print(format_config(cfg))
    return 0


def cmd_grid(args) -> int:
    cfg = _run_config(args)
    factor_paths = _parse_factor_args(args.factors)
    corpus = _load_factored_corpus(args.corpus, factor_paths)
    targets = read_corpus(args.target)
    out_dir = Path(args.out)
    if args.dry_run:
        print(format_config(cfg))
        return 0
    rows = checks.run_grid(corpus, targets, cfg, out_dir)
    print(f"{'model':<12} {'comb.':<8} {'factors':<24} {'BLEU':>7}")
    for row in rows:
        print(f"{row.arch:<12} {row.combine:<8} {row.factors:<24} {row.bleu:>7.2f}")
    _write_manifest(out_dir / "manifest.json", "grid", cfg.to_dict(), cfg.seed,
                    [Path(args.corpus), Path(args.target)] + [Path(p) for p in factor_paths.values()],
                    [out_dir / "grid_results.tsv"])
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factored-nmt",
        description="Factored neural machine translation pipeline (desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-bpe", help="learn joint BPE merges from corpora")
    p.add_argument("--corpus", action="append", required=True,
                   help="training corpus (repeat for a joint model)")
    p.add_argument("--num-merges", type=int, required=True)
    p.add_argument("--merges", required=True, help="output merges file")
    p.add_argument("--vocab", help="also write the subword vocabulary here")
    p.add_argument("--vocab-threshold", type=int, default=0)
    p.add_argument("--marker", default=bpe_mod.DEFAULT_MARKER)
    p.set_defaults(func=cmd_learn_bpe)

    p = sub.add_parser("apply-bpe", help="segment a corpus with learned merges")
    p.add_argument("--corpus", required=True)
    p.add_argument("--merges", required=True)
    p.add_argument("--vocab")
    p.add_argument("--vocab-threshold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply_bpe)

    p = sub.add_parser("ingest-tags", help="extract factor streams from a tagged corpus")
    p.add_argument("--tagged", required=True, help="CoNLL-U subset file")
    p.add_argument("--corpus", help="tokenized corpus to validate token counts against")
    p.add_argument("--out", required=True, help="output directory for factor files")
    p.set_defaults(func=cmd_ingest_tags)

    p = sub.add_parser("chunk", help="split a corpus into size-bounded chunks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-chars", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("resolve-synsets", help="per-token synsets with PoS backup")
    p.add_argument("--tagged", required=True)
    p.add_argument("--spans", required=True, help="synset span TSV")
    p.add_argument("--out", required=True, help="output factor file")
    p.set_defaults(func=cmd_resolve_synsets)

    p = sub.add_parser("align", help="align word-level factors to subwords")
    p.add_argument("--corpus", required=True, help="word-level corpus")
    p.add_argument("--factors", action="append", metavar="NAME=PATH", required=True)
    p.add_argument("--merges", required=True)
    p.add_argument("--vocab")
    p.add_argument("--strategy", choices=[s.value for s in AlignmentStrategy], default="repeat")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train a factored model")
    p.add_argument("--corpus", required=True, help="subword source corpus")
    p.add_argument("--target", required=True, help="subword target corpus")
    p.add_argument("--factors", action="append", metavar="NAME=PATH", default=None)
    p.add_argument("--val-corpus")
    p.add_argument("--val-target")
    p.add_argument("--val-factors", action="append", metavar="NAME=PATH", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true",
                   help="print the expanded config and write nothing")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a corpus with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="subword source corpus")
    p.add_argument("--factors", action="append", metavar="NAME=PATH", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--keep-bpe", action="store_true", help="do not join subwords")
    _add_run_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("score-bleu", help="corpus BLEU of hypotheses vs references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score_bleu)

    p = sub.add_parser("grad-check", help="finite-difference check of ops and models")
    p.add_argument("--arch", choices=["1enc", "nenc"])
    p.add_argument("--combine", choices=["sum", "concat"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("show-config", help="print the fully expanded run config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_show_config)

    p = sub.add_parser("grid", help="train the architecture/combination grid on a toy corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--factors", action="append", metavar="NAME=PATH", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")
    _add_run_flags(p)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
