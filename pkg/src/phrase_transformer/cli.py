"""``prt`` command line: segment, train, translate, average, eval, contrastive.

Exit codes: 0 success, 1 usage or configuration error, 2 bad input data,
3 failure while running. Output files are written to a temporary name and
renamed into place, so a failed command leaves none behind.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint
from .config import KEYS, ConfigError, load_config_file, model_config, parse_bool, resolve, train_config, validate
from .evaluation import DEFAULT_BOUNDARIES, EvaluationError, bleu, contrastive_accuracy, length_buckets, read_contrastive
from .kernels import BACKEND
from .model import EOS, PRTransformer, beam_search, greedy_decode, score_sequence
from .segmentation import TreeFormatError, extract_phrases_from_tree, ntok_for_length, parse_bracketed, plan_for, segment_ngram
from .training import DataError, TrainingError, Trainer, Vocab, average_checkpoints, build_vocab, load_parallel, write_averaged

log = logging.getLogger("prt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# file helpers


def _read_lines(path, what="input"):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from exc


def _write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _lines_text(lines):
    return "".join(line + "\n" for line in lines)


def sha256_of(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """What a run read, how it was configured and what it wrote."""

    def __init__(self, command, config, seed=None):
        self.command = command
        self.config = dict(config)
        self.seed = seed
        self.inputs = {}
        self.artifacts = []
        self.started = time.time()
        self.finished = None

    def add_input(self, role, path):
        if path:
            self.inputs[role] = {"path": os.path.abspath(path), "sha256": sha256_of(path)}

    def add_artifact(self, path):
        self.artifacts.append(os.path.abspath(path))

    def to_dict(self):
        return {
            "command": self.command,
            "version": __version__,
            "kernels": BACKEND,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "started": _iso(self.started),
            "finished": _iso(self.finished) if self.finished else None,
        }

    def write(self, path):
        self.finished = time.time()
        _write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _iso(t):
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t)) + f".{int(t % 1 * 1000):03d}Z"


# segment


def _phrases_line(tokens, phrases):
    return " ||| ".join(" ".join(tokens[i] for i in ph) for ph in phrases)


def cmd_segment(args):
    if args.mode == "tree" and not args.trees:
        raise UsageError("--mode tree needs --trees")
    lines = _read_lines(args.input)
    trees = None
    if args.mode == "tree":
        trees = _read_lines(args.trees, "tree file")
        if len(trees) != len(lines):
            raise DataError(f"line count mismatch: {args.trees} has {len(trees)} lines, {args.input} has {len(lines)}")
    out = []
    for i, line in enumerate(lines):
        tokens = line.split()
        if not tokens:
            out.append("")
            continue
        if trees is None:
            phrases = segment_ngram(len(tokens)).phrases()
        else:
            try:
                tree = parse_bracketed(trees[i])
            except TreeFormatError as exc:
                raise DataError(f"{args.trees}:{i + 1}: {exc}") from exc
            if tree.leaves() != tokens:
                raise DataError(f"{args.trees}:{i + 1}: tree leaves do not match the {len(tokens)} tokens of {args.input}:{i + 1}")
            n = args.max_phrase or ntok_for_length(len(tokens))
            phrases = extract_phrases_from_tree(tree, n, args.strict_budget)
        out.append(_phrases_line(tokens, phrases))
    _write_text(args.output, _lines_text(out))
    m = RunManifest("segment", {"mode": args.mode, "strict_budget": args.strict_budget, "max_phrase": args.max_phrase})
    m.add_input("input", args.input)
    m.add_input("trees", args.trees)
    m.add_artifact(args.output)
    _finish_manifest(m, args, args.output)
    return EXIT_OK


# train


def cmd_train(args):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k.name: getattr(args, k.name) for k in KEYS}
    values = resolve(file_values, overrides)
    errors = validate(values)
    if errors:
        raise ConfigError(errors)
    trees = values["train_trees"] if values["segmentation"] == "tree" else None
    pairs = load_parallel(values["train_src"], values["train_tgt"], trees, values["max_len"])
    if not pairs:
        raise DataError("no usable training pairs after length filtering")
    sv = build_vocab([p.src for p in pairs], values["src_vocab_size"] or None)
    tv = build_vocab([p.tgt for p in pairs], values["tgt_vocab_size"] or None)
    mcfg = model_config(values, len(sv), len(tv))
    model = PRTransformer(mcfg, seed=values["seed"])
    out_dir = values["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest("train", values, values["seed"])
    for role in ("train_src", "train_tgt"):
        manifest.add_input(role, values[role])
    manifest.add_input("train_trees", trees)
    manifest.add_input("config", args.config)
    log.info("%d pairs, vocab %d/%d, kernels %s", len(pairs), len(sv), len(tv), BACKEND)
    trainer = Trainer(model, pairs, sv, tv, train_config(values), out_dir)
    trainer.run()
    for path in trainer.checkpoints:
        manifest.add_artifact(path)
    if trainer.metrics_path:
        manifest.add_artifact(trainer.metrics_path)
    manifest.write(args.manifest or os.path.join(out_dir, "manifest.json"))
    last = trainer.history[-1] if trainer.history else None
    if last:
        print(f"trained {trainer.step} steps, final loss {last.loss:.4f}, {len(trainer.checkpoints)} checkpoints in {out_dir}")
    return EXIT_OK


# translate / contrastive


def _load_model(path):
    model, meta, _ = load_checkpoint(path)
    if "src_vocab" not in meta or "tgt_vocab" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no vocabularies")
    return model, Vocab(meta["src_vocab"]), Vocab(meta["tgt_vocab"])


def _tree_plans(model, lines, trees_path, strict_budget):
    """Per-line phrase plans (None for N-gram models)."""
    if model.config.segmentation != "tree" or not model.config.phrase_representation:
        return [None] * len(lines)
    if not trees_path:
        raise UsageError("this model segments by parse trees; pass --trees")
    trees = _read_lines(trees_path, "tree file")
    if len(trees) != len(lines):
        raise DataError(f"line count mismatch: {trees_path} has {len(trees)} lines, input has {len(lines)}")
    plans = []
    for i, (line, text) in enumerate(zip(lines, trees)):
        tokens = line.split()
        if not tokens:
            plans.append(None)
            continue
        try:
            tree = parse_bracketed(text)
        except TreeFormatError as exc:
            raise DataError(f"{trees_path}:{i + 1}: {exc}") from exc
        if tree.leaves() != tokens:
            raise DataError(f"{trees_path}:{i + 1}: tree leaves do not match the input tokens")
        plans.append(plan_for(len(tokens), "tree", tree, strict_budget))
    return plans


def cmd_translate(args):
    model, sv, tv = _load_model(args.checkpoint)
    lines = _read_lines(args.input)
    plans = _tree_plans(model, lines, args.trees, model.config.strict_budget)
    beam = 1 if args.greedy else args.beam
    if beam < 1:
        raise UsageError("--beam must be >= 1")
    out = []
    for i, line in enumerate(lines):
        tokens = line.split()
        if not tokens:
            out.append("")
            continue
        if len(tokens) >= model.config.max_positions:
            raise DataError(f"{args.input}:{i + 1}: {len(tokens)} tokens exceed the model's {model.config.max_positions} positions")
        src = sv.encode(tokens)
        if args.greedy:
            hyp = greedy_decode(model, [src], plans[i], args.max_len)[0]
        else:
            hyp = beam_search(model, src, plans[i], beam, args.max_len)
        out.append(" ".join(tv.decode(hyp.output)))
    _write_text(args.output, _lines_text(out))
    m = RunManifest("translate", {"beam": beam, "greedy": args.greedy, "max_len": args.max_len})
    m.add_input("checkpoint", args.checkpoint)
    m.add_input("input", args.input)
    m.add_input("trees", args.trees)
    m.add_artifact(args.output)
    _finish_manifest(m, args, args.output)
    return EXIT_OK


def cmd_contrastive(args):
    model, sv, tv = _load_model(args.checkpoint)
    if model.config.phrase_representation and model.config.segmentation == "tree":
        raise UsageError("contrastive scoring supports N-gram segmentation models only")
    pairs = read_contrastive(args.pairs)

    def scorer(source, target):
        return score_sequence(model, sv.encode(source.split()), tv.encode(target.split()) + [EOS])

    report = contrastive_accuracy(scorer, pairs)
    print(report.table())
    m = RunManifest("contrastive", {"pairs": len(pairs)})
    m.add_input("checkpoint", args.checkpoint)
    m.add_input("pairs", args.pairs)
    if args.csv:
        _write_text(args.csv, report.to_csv())
        m.add_artifact(args.csv)
    _finish_manifest(m, args, args.csv or args.pairs + ".contrastive")
    return EXIT_OK


# average / eval


def cmd_average(args):
    meta, params = average_checkpoints(args.checkpoints)
    write_averaged(args.output, meta, params)
    m = RunManifest("average", {"count": len(args.checkpoints)})
    for i, path in enumerate(args.checkpoints):
        m.add_input(f"checkpoint_{i}", path)
    m.add_artifact(args.output)
    _finish_manifest(m, args, args.output)
    print(f"averaged {len(args.checkpoints)} checkpoints into {args.output}")
    return EXIT_OK


def _boundaries(text):
    try:
        return tuple(int(b) for b in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_eval(args):
    hyps = _read_lines(args.hyp, "hypotheses")
    refs = _read_lines(args.ref, "references")
    if len(hyps) != len(refs):
        raise EvaluationError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    report = bleu(hyps, refs)
    print(report)
    m = RunManifest("eval", {"buckets": list(args.buckets) if args.buckets else None})
    m.add_input("hypotheses", args.hyp)
    m.add_input("references", args.ref)
    csv_text = None
    if args.buckets:
        if not args.src:
            raise UsageError("--buckets needs --src to measure source lengths")
        srcs = _read_lines(args.src, "sources")
        if len(srcs) != len(hyps):
            raise EvaluationError(f"{args.src} has {len(srcs)} lines but {args.hyp} has {len(hyps)}")
        buckets = length_buckets(srcs, hyps, refs, args.buckets)
        print(buckets.table())
        csv_text = buckets.to_csv()
        m.add_input("sources", args.src)
    if args.csv:
        if csv_text is None:
            csv_text = "bleu,bp,hyp_len,ref_len\n" + f"{report.score:.4f},{report.brevity_penalty:.6f},{report.hyp_len},{report.ref_len}\n"
        _write_text(args.csv, csv_text)
        m.add_artifact(args.csv)
    _finish_manifest(m, args, args.csv or args.hyp + ".eval")
    return EXIT_OK


def _finish_manifest(manifest, args, stem):
    manifest.write(args.manifest or stem + ".manifest.json")


# parser


def _bool_flag(parser, flag, help_text, default=None, dest=None):
    parser.add_argument(flag, type=parse_bool, nargs="?", const=True, default=default, metavar="BOOL", help=help_text, dest=dest)


def build_parser():
    p = _Parser(prog="prt", description="Phrase-representation Transformer translation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log level")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def manifest_flag(sp):
        sp.add_argument("--manifest", help="where to write the run manifest (default: next to the main output)")

    s = sub.add_parser("segment", help="split sentences into phrases")
    s.add_argument("--input", required=True, help="token file, one sentence per line")
    s.add_argument("--output", required=True, help="phrases joined by ' ||| ', one line per sentence")
    s.add_argument("--mode", choices=["ngram", "tree"], default="ngram")
    s.add_argument("--trees", help="bracketed trees aligned with --input (tree mode)")
    s.add_argument("--max-phrase", type=int, default=0, help="tree mode phrase budget (0: the N-gram width for the sentence)")
    _bool_flag(s, "--strict-budget", "tree mode: restart the budget after the first subtree", default=False)
    manifest_flag(s)
    s.set_defaults(func=cmd_segment)

    t = sub.add_parser("train", help="train a model from a config file and flags")
    t.add_argument("--config", help="key = value file; flags override it")
    for key in KEYS:
        help_text = f"{key.help} (default {key.default!r})"
        if key.kind is bool:
            _bool_flag(t, key.flag, help_text, dest=key.name)
        else:
            t.add_argument(key.flag, type=key.parse, default=None, help=help_text, dest=key.name)
    manifest_flag(t)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="decode a source file with a checkpoint")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--trees", help="source parse trees (tree-segmentation models)")
    g = tr.add_mutually_exclusive_group()
    g.add_argument("--beam", type=int, default=4, help="beam size (default 4)")
    g.add_argument("--greedy", action="store_true", help="argmax decoding")
    tr.add_argument("--max-len", type=int, default=None, help="longest output (default: source length + 50)")
    manifest_flag(tr)
    tr.set_defaults(func=cmd_translate)

    a = sub.add_parser("average", help="average the parameters of several checkpoints")
    a.add_argument("checkpoints", nargs="+")
    a.add_argument("--output", required=True)
    manifest_flag(a)
    a.set_defaults(func=cmd_average)

    e = sub.add_parser("eval", help="corpus BLEU, optionally per source-length bucket")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--src", help="source file (needed for --buckets)")
    e.add_argument(
        "--buckets", type=_boundaries, nargs="?", const=DEFAULT_BOUNDARIES, default=None,
        help="comma-separated lower bounds, e.g. 0,15,30,45 (bare flag uses these)",
    )
    e.add_argument("--csv", help="write the report as CSV")
    manifest_flag(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("contrastive", help="score contrastive translation pairs")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--pairs", required=True, help="TSV: source, reference, contrastive[, distance]")
    c.add_argument("--csv", help="write the per-distance breakdown as CSV")
    manifest_flag(c)
    c.set_defaults(func=cmd_contrastive)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"prt {args.command}: invalid configuration:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EvaluationError, CheckpointError, TreeFormatError) as exc:
        print(f"prt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"prt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
