"""Command-line entry point: preprocess, synth, train, translate, eval, grad-check.

Options may come from a JSON config file (``--config``) whose keys are the
long option names with dashes replaced by underscores; flags given on the
command line win. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("phrasenet")


class UsageError(Exception):
    pass


DEFAULTS = {
    "preprocess": dict(source=None, target=None, table=None, out=None, n_p=10),
    "synth": dict(
        out=None, vocab_size=120, n_templates=60, n_rules=40, oov_fraction=0.25,
        n_pairs=2000, n_dev=200, n_test=200, seed=0,
    ),
    "train": dict(
        train_src=None, train_tgt=None, dev_src=None, dev_tgt=None, table=None,
        src_vocab=None, tgt_vocab=None, src_vocab_size=16000, tgt_vocab_size=16000,
        variant="gate", d_e=16, d_h=32, n_p=10, gate_word_factor=True,
        lr=1e-3, clip_norm=5.0, batch_size=32, epochs=None, steps=None, seed=0, workers=1,
        max_len=50, patience=None, checkpoint=None, metrics=None, resume=None,
        grad_check=False, grad_check_tol=1e-4, log_every=50,
    ),
    "translate": dict(
        checkpoint=None, input="-", output="-", table=None, beam=1, max_len=100, trace=None, attention=None,
    ),
    "eval": dict(candidates=None, references=None, metadata=None, json=False),
    "grad-check": dict(variant="all", tol=1e-4, step=1e-5, seed=0, d_e=8, d_h=12, vocab_size=20, n_p=3),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="warnings and errors only")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phrasenet", description="Attention translation with a phrase memory.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    ap.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("preprocess", help="annotate a corpus with phrase candidates (JSON lines)")
    _add_common(p)
    p.add_argument("--source", default=S, help="source sentences, one per line")
    p.add_argument("--target", default=S, help="optional aligned references (enables gold phrases)")
    p.add_argument("--table", default=S, help="phrase table (src<TAB>tgt)")
    p.add_argument("--out", default=S, help="output JSON-lines file")
    p.add_argument("--n-p", type=int, default=S)

    p = sub.add_parser("synth", help="generate a synthetic corpus and phrase table")
    _add_common(p)
    p.add_argument("--out", default=S, help="output directory")
    for name, typ in [("vocab-size", int), ("n-templates", int), ("n-rules", int), ("oov-fraction", float),
                      ("n-pairs", int), ("n-dev", int), ("n-test", int), ("seed", int)]:
        p.add_argument(f"--{name}", type=typ, default=S)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    for name in ["train-src", "train-tgt", "dev-src", "dev-tgt", "table", "src-vocab", "tgt-vocab",
                 "checkpoint", "metrics", "resume"]:
        p.add_argument(f"--{name}", default=S)
    p.add_argument("--variant", choices=["gate", "softmax", "baseline"], default=S)
    for name, typ in [("d-e", int), ("d-h", int), ("n-p", int), ("src-vocab-size", int), ("tgt-vocab-size", int),
                      ("lr", float), ("clip-norm", float), ("batch-size", int), ("epochs", int), ("steps", int),
                      ("seed", int), ("workers", int), ("max-len", int), ("patience", int),
                      ("grad-check-tol", float), ("log-every", int)]:
        p.add_argument(f"--{name}", type=typ, default=S)
    p.add_argument("--gate-word-factor", action=argparse.BooleanOptionalAction, default=S)
    p.add_argument("--grad-check", action="store_true", default=S, help="verify gradients first; abort on failure")

    p = sub.add_parser("translate", help="translate sentences with a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--input", default=S, help="source file or - for stdin")
    p.add_argument("--output", default=S, help="output file or - for stdout")
    p.add_argument("--table", default=S)
    p.add_argument("--beam", type=int, default=S)
    p.add_argument("--max-len", type=int, default=S)
    p.add_argument("--trace", nargs="?", const="-", default=S, help="per-step decode trace (file, or stderr)")
    p.add_argument("--attention", default=S, help="write attention weights as JSON lines")

    p = sub.add_parser("eval", help="score translations with BLEU and phrase accuracy")
    _add_common(p)
    p.add_argument("--candidates", default=S)
    p.add_argument("--references", default=S)
    p.add_argument("--metadata", default=S, help="synthetic phrase metadata (JSON lines)")
    p.add_argument("--json", action="store_true", default=S)

    p = sub.add_parser("grad-check", help="finite-difference check on the built-in toy batch")
    _add_common(p)
    p.add_argument("--variant", choices=["gate", "softmax", "baseline", "all"], default=S)
    for name, typ in [("tol", float), ("step", float), ("seed", int), ("d-e", int), ("d-h", int),
                      ("vocab-size", int), ("n-p", int)]:
        p.add_argument(f"--{name}", type=typ, default=S)
    return ap


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line flags."""
    opts = dict(DEFAULTS[args.command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "quiet")}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_opts = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(file_opts, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = set(file_opts) - set(opts)
        if unknown:
            raise UsageError(f"{path}: unknown options {sorted(unknown)}")
        opts.update(file_opts)
    opts.update(flags)
    return opts


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(opts: dict, *keys: str) -> None:
    for k in keys:
        v = opts.get(k)
        if v not in (None, "-") and not Path(v).is_file():
            raise UsageError(f"--{k.replace('_', '-')}: no such file: {v}")


# ------------------------------------------------------------- commands


def cmd_preprocess(o: dict) -> int:
    from .phrase_memory import PhraseTable, annotate, dump_annotations, load_table
    from .corpus import read_lines

    _need(o, "source", "out")
    _existing(o, "source", "target", "table")
    table = load_table(o["table"]) if o["table"] else PhraseTable()
    src = read_lines(o["source"])
    tgt = read_lines(o["target"]) if o["target"] else [None] * len(src)
    if len(tgt) != len(src):
        raise ValueError("source and target differ in line count")
    anns = [annotate(table, s, t, o["n_p"]) for s, t in zip(src, tgt)]
    dump_annotations(anns, o["out"], table)
    with_phrase = sum(bool(a.occurrences) for a in anns)
    cover = [1.0 - len(a.source_words) / len(s) if s else 0.0 for a, s in zip(anns, src)]
    print(f"sentences\t{len(anns)}")
    print(f"with_phrase\t{with_phrase}\t{with_phrase / max(len(anns), 1):.4f}")
    print(f"mean_coverage\t{float(np.mean(cover)) if cover else 0.0:.4f}")
    if o["target"]:
        print(f"gold_phrases\t{sum(len(a.gold) for a in anns)}")
    return 0


def cmd_synth(o: dict) -> int:
    from .synthetic import SyntheticConfig, generate_synthetic

    _need(o, "out")
    keys = ["vocab_size", "n_templates", "n_rules", "oov_fraction", "n_pairs", "n_dev", "n_test", "seed"]
    try:
        cfg = SyntheticConfig(**{k: o[k] for k in keys})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corpus = generate_synthetic(cfg)
    corpus.write(o["out"])
    sizes = " ".join(f"{k}={len(v)}" for k, v in corpus.splits.items())
    print(f"wrote {o['out']}: {sizes} rules={len(corpus.table)} oov_rules={len(corpus.oov_rules)} "
          f"target_vocab={len(corpus.target_vocab) + 4}")
    return 0


def _grad_check(variant: str, d_e: int, d_h: int, vocab_size: int, n_p: int, tol: float,
                step: float = 1e-5, seed: int = 0):
    from .model import PhraseNet
    from .params import ModelConfig
    from .toy import toy_batch
    from .trainer import verify_gradients

    examples, sv, tv, _ = toy_batch(n_p=n_p, size=vocab_size)
    cfg = ModelConfig(len(sv), len(tv), variant, d_e, d_h, n_p)
    model = PhraseNet(cfg, rng=seed)
    return verify_gradients(model, examples, tol=tol, step=step)


def cmd_train(o: dict) -> int:
    from .corpus import Vocabulary, build_vocab, make_example, read_parallel
    from .model import PhraseNet
    from .params import ModelConfig
    from .phrase_memory import load_table
    from .trainer import Trainer, TrainerConfig

    _need(o, "train_src", "train_tgt", "checkpoint")
    _existing(o, "train_src", "train_tgt", "dev_src", "dev_tgt", "table", "src_vocab", "tgt_vocab", "resume")
    if (o["dev_src"] is None) != (o["dev_tgt"] is None):
        raise UsageError("--dev-src and --dev-tgt go together")
    if o["epochs"] is None and o["steps"] is None:
        raise UsageError("give --epochs or --steps")
    for k in ("batch_size", "workers", "d_e", "d_h", "n_p"):
        if o[k] < 1:
            raise UsageError(f"--{k.replace('_', '-')} must be >= 1")
    Path(o["checkpoint"]).parent.mkdir(parents=True, exist_ok=True)

    if o["grad_check"]:
        rep = _grad_check(o["variant"], 4, 6, 20, 3, o["grad_check_tol"])
        sys.stdout.write(rep.format() + "\n")
        if not rep.passed:
            logger.error("gradient check failed for %s", ", ".join(rep.failed_groups))
            return 1

    src, tgt = read_parallel(o["train_src"], o["train_tgt"])
    tcfg = TrainerConfig(o["batch_size"], o["max_len"], o["lr"], o["clip_norm"], o["seed"], o["workers"], o["log_every"])
    if o["resume"]:
        trainer = Trainer.resume(o["resume"], tcfg, o["metrics"], variant=o["variant"])
        if trainer.vocabs is None:
            raise ValueError(f"{o['resume']} stores no vocabularies")
        sv, tv = trainer.vocabs
        model = trainer.model
        logger.info("resumed from %s at step %d", o["resume"], trainer.step)
    else:
        sv = Vocabulary.load(o["src_vocab"]) if o["src_vocab"] else build_vocab(src, o["src_vocab_size"])
        tv = Vocabulary.load(o["tgt_vocab"]) if o["tgt_vocab"] else build_vocab(tgt, o["tgt_vocab_size"])
        cfg = ModelConfig(len(sv), len(tv), o["variant"], o["d_e"], o["d_h"], o["n_p"], o["gate_word_factor"])
        model = PhraseNet(cfg, rng=o["seed"])
        trainer = Trainer(model, tcfg, o["metrics"])
        trainer.vocabs = (sv, tv)
    n_p = model.config.n_p
    table = None
    if model.variant != "baseline" and o["table"]:
        table = load_table(o["table"])
    elif model.variant != "baseline":
        logger.warning("no phrase table given; the model will only see word mode")
    train = [make_example(s, t, sv, tv, table, n_p) for s, t in zip(src, tgt) if s and t]
    dev = None
    if o["dev_src"]:
        dsrc, dtgt = read_parallel(o["dev_src"], o["dev_tgt"])
        dev = [make_example(s, t, sv, tv, table, n_p) for s, t in zip(dsrc, dtgt) if s and t]
    logger.info("training %s on %d pairs (vocab %d/%d)", model.variant, len(train), len(sv), len(tv))
    trainer.fit(train, epochs=o["epochs"], max_steps=o["steps"], dev=dev, patience=o["patience"],
                checkpoint_path=o["checkpoint"])
    trainer.save(o["checkpoint"])
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f"step\t{last.step}\tloss\t{last.loss:.6f}\tperplexity\t{last.perplexity:.6f}")
    return 0


def _open_out(path: str):
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8")


def cmd_translate(o: dict) -> int:
    from .corpus import make_example
    from .phrase_memory import load_table
    from .search import decode_beam, decode_greedy
    from .trainer import load_checkpoint

    _need(o, "checkpoint")
    _existing(o, "checkpoint", "input", "table")
    if o["beam"] < 1 or o["max_len"] < 1:
        raise UsageError("--beam and --max-len must be >= 1")
    ckpt = load_checkpoint(o["checkpoint"])
    if ckpt.vocabs is None:
        raise ValueError(f"{o['checkpoint']} stores no vocabularies")
    model, (sv, tv) = ckpt.model, ckpt.vocabs
    table = load_table(o["table"]) if o["table"] and model.variant != "baseline" else None
    if table is None and model.variant != "baseline":
        logger.warning("no phrase table given; decoding in word mode only")
    lines = (sys.stdin.read() if o["input"] == "-" else Path(o["input"]).read_text(encoding="utf-8")).splitlines()
    out = _open_out(o["output"])
    trace_fh = None
    if o["trace"]:
        trace_fh = sys.stderr if o["trace"] == "-" else open(o["trace"], "w", encoding="utf-8")
    att_fh = open(o["attention"], "w", encoding="utf-8") if o["attention"] else None
    try:
        for i, line in enumerate(lines):
            toks = line.split()
            if not toks:
                out.write("\n")
                continue
            ex = make_example(toks, None, sv, tv, table, model.config.n_p)
            trace = [] if trace_fh else None
            if o["beam"] == 1:
                hyp = decode_greedy(model, ex, tv, o["max_len"], trace=trace)
            else:
                hyp = decode_beam(model, ex, tv, o["beam"], o["max_len"])
                if trace_fh:
                    decode_greedy(model, ex, tv, o["max_len"], trace=trace)
            out.write(" ".join(hyp.tokens) + "\n")
            if trace_fh:
                trace_fh.write(f"# sentence {i}\n")
                for step in trace:
                    trace_fh.write(step.format() + "\n")
            if att_fh:
                rec = {"sentence": i, "source": toks, "output": hyp.tokens, "alpha": hyp.attention().tolist()}
                att_fh.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
        if trace_fh not in (None, sys.stderr):
            trace_fh.close()
        if att_fh:
            att_fh.close()
    return 0


def cmd_eval(o: dict) -> int:
    from .corpus import read_lines
    from .evaluation import corpus_bleu, phrase_accuracy
    from .synthetic import read_metadata

    _need(o, "candidates", "references")
    _existing(o, "candidates", "references", "metadata")
    cands, refs = read_lines(o["candidates"]), read_lines(o["references"])
    report = corpus_bleu(cands, refs)
    acc = None
    if o["metadata"]:
        acc = phrase_accuracy(cands, refs, read_metadata(o["metadata"]))
    if o["json"]:
        payload = json.loads(report.to_json())
        if acc is not None:
            payload["phrase_accuracy"] = acc.to_dict()
        print(json.dumps(payload, sort_keys=True))
    else:
        print(report.format())
        if acc is not None:
            print(
                f"phrase recall={acc.recall:.4f} position={acc.position_rate:.4f} n={acc.total} "
                f"oov_recall={acc.oov_recall:.4f} oov_position={acc.oov_position_rate:.4f} oov_n={acc.oov_total}"
            )
    return 0


def cmd_grad_check(o: dict) -> int:
    variants = ["gate", "softmax"] if o["variant"] == "all" else [o["variant"]]
    if o["vocab_size"] < 8:
        raise UsageError("--vocab-size must be >= 8 for the toy batch")
    ok = True
    for v in variants:
        rep = _grad_check(v, o["d_e"], o["d_h"], o["vocab_size"], o["n_p"], o["tol"], o["step"], o["seed"])
        print(f"[{v}] {'PASS' if rep.passed else 'FAIL'}")
        print(rep.format())
        ok &= rep.passed
    return 0 if ok else 1


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        logger.error("%s", exc)
        return 2
    except KeyboardInterrupt:
        logger.error("interrupted")
        return 1
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        logger.error("%s: %s", type(exc).__name__, exc)
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
