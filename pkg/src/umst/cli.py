"""Command-line entry point: ``umst <subcommand> ...``.

Exit codes: 0 success, 1 validation or verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .model import ModelConfig, Seq2Seq, load_checkpoint
from .structure import (MalformedSegmentation, StructureFormatError, parse_bpe_stream,
                        parse_conllu, read_conllu_sentences, read_sidecar,
                        serialize_structure)
from .training import (ABLATION_VARIANTS, TrainConfig, ablation_tsv, run_ablation_suite,
                       train_loop)
from .verify import SUITES, run_suites

log = logging.getLogger("umst")


class CliError(Exception):
    """Validation failure reported to the user with exit code 1."""


# config keys settable from a config file or the command line; vocab sizes come from data
_MODEL_FIELDS = [f for f in dataclasses.fields(ModelConfig)
                 if f.name not in ("src_vocab_size", "tgt_vocab_size")]
_TRAIN_FIELDS = list(dataclasses.fields(TrainConfig))
CONFIG_KEYS = {f.name: f for f in _MODEL_FIELDS + _TRAIN_FIELDS}

_HELP = {
    "d_model": "hidden size", "n_heads": "attention heads", "d_ffn": "feed-forward width",
    "n_enc_layers": "encoder blocks", "n_dec_layers": "decoder blocks",
    "dropout": "dropout rate", "max_positions": "longest supported sequence",
    "ln_eps": "layer-norm epsilon", "use_class_embedding": "add the fragment/word class embedding",
    "use_wgcn": "intra-group (word) GCN", "use_pgcn": "inter-group (phrase) GCN",
    "use_branch2": "word-level attention branch", "wgcn_impl": "gcn or pool",
    "upsample_mode": "boundary, paper_literal, nearest or linear",
    "sharing": "GCN weight sharing: none, across_blocks, within_block",
    "share_qk": "reuse branch-1 Q/K in branch 2", "precision": "float32 or float64",
    "seed": "random seed (model init, batch order, dropout)",
    "peak_lr": "peak learning rate", "warmup_steps": "linear warmup steps",
    "beta1": "Adam beta1", "beta2": "Adam beta2", "adam_eps": "Adam epsilon",
    "max_steps": "optimizer updates", "batch_size": "sentences per batch",
    "label_smoothing": "label smoothing mass", "clip_norm": "gradient norm clip (0 = off)",
    "accum_steps": "batches accumulated per update", "log_interval": "steps between log lines",
    "eval_interval": "steps between validation decodes",
    "target_accuracy": "stop once validation token accuracy reaches this (0 = never)",
    "word_adjacency": "correct, random or shuffle sub-word adjacency",
    "adjacency_density": "edge probability for random adjacency",
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _field_type(f):
    return {"bool": _bool, "int": int, "float": float, "str": str}[
        f.type if isinstance(f.type, str) else f.type.__name__]


def _coerce(key: str, value):
    f = CONFIG_KEYS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "bool":
        if isinstance(value, bool):
            return value
        return _bool(str(value))
    if kind == "int" and isinstance(value, float) and value.is_integer():
        return int(value)
    return _field_type(f)(value)


def load_config_file(path) -> dict:
    """Flat JSON object of config keys; unknown keys are rejected by name."""
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise CliError(f"{path}: config must be a flat JSON object")
    unknown = sorted(set(obj) - set(CONFIG_KEYS))
    if unknown:
        raise CliError(f"{path}: unknown config key {unknown[0]!r}")
    try:
        return {k: _coerce(k, v) for k, v in obj.items()}
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise CliError(f"{path}: {exc}") from None


def resolve_configs(file_values: dict, overrides: dict, src_vocab: int, tgt_vocab: int,
                    max_len: int) -> tuple[ModelConfig, TrainConfig]:
    values = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    mkw = {f.name: values[f.name] for f in _MODEL_FIELDS if f.name in values}
    mkw.setdefault("precision", "float32")
    mkw.setdefault("max_positions", max(256, max_len))
    tkw = {f.name: values[f.name] for f in _TRAIN_FIELDS if f.name in values}
    base_t = TrainConfig.toy()
    tkw = {**{f.name: getattr(base_t, f.name) for f in _TRAIN_FIELDS}, **tkw}
    try:
        return (ModelConfig(src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab, **mkw),
                TrainConfig(**tkw))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    bpe_lines = D.read_lines(args.bpe)
    blocks = read_conllu_sentences(Path(args.conllu).read_text(encoding="utf-8"))
    bpe_lines = [line for line in bpe_lines if line.strip()]
    n = min(len(bpe_lines), len(blocks))
    records = []
    for i in range(n):
        try:
            seg = parse_bpe_stream(bpe_lines[i].split(), args.marker)
            dep = parse_conllu(blocks[i])
        except (MalformedSegmentation, ValueError) as exc:
            raise CliError(f"sentence {i + 1}: {exc}") from None
        if dep.word_count != seg.L_words:
            raise CliError(f"sentence {i + 1}: BPE stream has {seg.L_words} words but parse "
                           f"has {dep.word_count}")
        records.append(serialize_structure(seg, dep))
    if len(bpe_lines) != len(blocks):
        raise CliError(f"sentence count mismatch: {len(bpe_lines)} BPE lines vs {len(blocks)} "
                       f"parses; first unmatched sentence {n + 1}")
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r + "\n")
    print(f"wrote {len(records)} structures to {args.out}")
    return 0


def cmd_make_toy(args) -> int:
    spec = D.ToyTaskSpec(n_word_types=args.word_types, n_train=args.train, n_valid=args.valid,
                         min_pieces=args.min_pieces, max_pieces=args.max_pieces,
                         dependency=args.dependency, seed=args.seed, marker=args.marker)
    corpus = D.generate_toy_corpus(spec)
    for split, sents in corpus.items():
        D.write_split(args.out, split, sents)
    print(f"wrote {spec.n_train} train / {spec.n_valid} valid sentences to {args.out}")
    return 0


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in CONFIG_KEYS}


def _load_data(directory):
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"data directory not found: {d}")
    try:
        train = D.read_split(d, "train")
        valid = D.read_split(d, "valid") if (d / "valid.sidecar.jsonl").exists() else []
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    return train, valid


def cmd_train(args) -> int:
    train, valid = _load_data(args.data)
    file_values = load_config_file(args.config) if args.config else {}
    src_v, tgt_v = D.vocabs_from(train)
    longest = max(max(s.seg.L, len(s.target) + 1) for s in train + valid)
    mcfg, tcfg = resolve_configs(file_values, _overrides(args), len(src_v), len(tgt_v), longest)
    extra = {"src_vocab": src_v.to_list(), "tgt_vocab": tgt_v.to_list(),
             "word_adjacency": tcfg.word_adjacency, "adjacency_density": tcfg.adjacency_density,
             "adjacency_seed": tcfg.seed}
    tr = D.to_examples(train, src_v, tgt_v, tcfg.word_adjacency, tcfg.adjacency_density, tcfg.seed)
    va = D.to_examples(valid, src_v, tgt_v, tcfg.word_adjacency, tcfg.adjacency_density,
                       tcfg.seed + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"model": mcfg.to_dict(), "train": dataclasses.asdict(tcfg)}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    model = Seq2Seq(mcfg)
    result = train_loop(model, tr, tcfg, va, out, extra)
    print(f"trained {result.steps} steps; final loss {result.final_loss:.4f}; "
          f"best valid token acc {result.best_valid_acc:.4f} at step {result.best_step}")
    return 0


def _load_model(path):
    try:
        model, extra = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return model, extra, D.Vocab.from_list(extra["src_vocab"]), D.Vocab.from_list(extra["tgt_vocab"])


def _sidecar_examples(sidecar, input_path, src_v, tgt_v, extra):
    try:
        records = read_sidecar(sidecar)
    except (OSError, StructureFormatError) as exc:
        raise CliError(str(exc)) from None
    if input_path is not None:
        lines = [line for line in D.read_lines(input_path)]
        if len(lines) != len(records):
            raise CliError(f"input has {len(lines)} lines but sidecar has {len(records)}; "
                           f"first unmatched line {min(len(lines), len(records)) + 1}")
        for i, (line, (seg, _)) in enumerate(zip(lines, records), start=1):
            if line.split() != list(seg.tokens):
                raise CliError(f"line {i}: input tokens disagree with sidecar")
    for i, (seg, _) in enumerate(records, start=1):
        unknown = [t for t in seg.tokens if t not in src_v.stoi]
        if unknown:
            raise CliError(f"line {i}: token {unknown[0]!r} not in checkpoint vocabulary")
    sents = [D.Sentence(seg, dep, []) for seg, dep in records]
    return D.to_examples(sents, src_v, tgt_v, extra.get("word_adjacency", "correct"),
                         extra.get("adjacency_density", 0.1), extra.get("adjacency_seed", 0) + 2)


def cmd_decode(args) -> int:
    model, extra, src_v, tgt_v = _load_model(args.ckpt)
    examples = _sidecar_examples(args.sidecar, args.input, src_v, tgt_v, extra)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for lo in range(0, len(examples), 100):
            chunk = examples[lo:lo + 100]
            for hyp in model.greedy_decode(chunk, max(len(e.src_ids) for e in chunk) + 2):
                fh.write(" ".join(tgt_v.decode(hyp)) + "\n")
    return 0


def cmd_dump_attention(args) -> int:
    model, extra, src_v, tgt_v = _load_model(args.ckpt)
    examples = _sidecar_examples(args.sidecar, None, src_v, tgt_v, extra)
    records = read_sidecar(args.sidecar)
    if not 0 <= args.sentence_index < len(examples):
        raise CliError(f"sentence index {args.sentence_index} out of range (0..{len(examples) - 1})")
    if not 0 <= args.layer < model.cfg.n_enc_layers:
        raise CliError(f"layer {args.layer} out of range (0..{model.cfg.n_enc_layers - 1})")
    if not 0 <= args.head < model.cfg.n_heads:
        raise CliError(f"head {args.head} out of range (0..{model.cfg.n_heads - 1})")
    if args.branch == "2" and not model.cfg.use_branch2:
        raise CliError("branch 2 is disabled in this checkpoint")
    maps = model.attention_maps(examples[args.sentence_index])[args.layer]
    key = {"1": "attn1", "2": "attn2", "fused": "fused"}[args.branch]
    grid = maps[key][args.head]
    seg = records[args.sentence_index][0]
    if args.branch == "2":
        words = [[] for _ in range(seg.L_words)]
        for tok, w in zip(seg.tokens, seg.word_index):
            words[w].append(tok)
        header = ["".join(p[:-len(args.marker)] if p.endswith(args.marker) else p for p in ws)
                  for ws in words]
    else:
        header = list(seg.tokens)
    write_grid(args.out, header, grid)
    return 0


def write_grid(path, header, grid: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in grid:
            fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")


def read_grid(path) -> tuple[list[str], np.ndarray]:
    lines = D.read_lines(path)
    header = lines[0].split("\t")
    grid = np.array([[float(v) for v in line.split("\t")] for line in lines[1:]])
    return header, grid.reshape(len(lines) - 1, len(header))


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names, sidecar=args.sidecar)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  [{r.suite}] {r.name}  {r.detail}  ({r.seconds:.2f}s)")
    summary = {"passed": all(r.passed for r in results), "results": [r.to_dict() for r in results]}
    if args.json:
        with open(args.json, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    print(json.dumps({"passed": summary["passed"], "n_checks": len(results),
                      "n_failed": sum(not r.passed for r in results)}))
    return 0 if summary["passed"] else 1


def cmd_ablate(args) -> int:
    train, valid = _load_data(args.data)
    if not valid:
        raise CliError("ablation needs a valid split")
    file_values = load_config_file(args.config) if args.config else {}
    src_v, tgt_v = D.vocabs_from(train)
    longest = max(max(s.seg.L, len(s.target) + 1) for s in train + valid)
    mcfg, tcfg = resolve_configs(file_values, _overrides(args), len(src_v), len(tgt_v), longest)
    tr = D.to_examples(train, src_v, tgt_v)
    va = D.to_examples(valid, src_v, tgt_v)
    variants = args.variants.split(",") if args.variants else None
    if variants:
        bad = [v for v in variants if v not in ABLATION_VARIANTS]
        if bad:
            raise CliError(f"unknown variant {bad[0]!r}")
    rows = run_ablation_suite(mcfg, tcfg, tr, va, variants)
    text = ablation_tsv(rows)
    Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides (take precedence over --config)")
    for name, f in CONFIG_KEYS.items():
        flag = "--" + name.replace("_", "-")
        default = f.default
        g.add_argument(flag, dest=name, type=_field_type(f), default=None, metavar="VALUE",
                       help=f"{_HELP.get(name, name)} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="umst", description="Multiscale Transformer toolkit: preprocessing, training, "
        "decoding, attention export and self-checks.",
        epilog="Exit codes: 0 success, 1 validation or verification failure, 2 usage error.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="BPE text + CoNLL-U parses -> structure sidecar")
    p.add_argument("--bpe", required=True, help="one BPE-segmented sentence per line")
    p.add_argument("--conllu", required=True, help="CoNLL-U file, blank-line separated sentences")
    p.add_argument("--marker", default="@@", help="continuation marker (default: @@)")
    p.add_argument("--out", required=True, help="output sidecar (JSON Lines)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("make-toy", help="write the synthetic structured translation task")
    p.add_argument("--out", required=True, help="output data directory")
    p.add_argument("--word-types", type=int, default=40, help="distinct words (default: 40)")
    p.add_argument("--min-pieces", type=int, default=1, help="fewest pieces per word (default: 1)")
    p.add_argument("--max-pieces", type=int, default=3, help="most pieces per word (default: 3)")
    p.add_argument("--train", type=int, default=2000, help="training sentences (default: 2000)")
    p.add_argument("--valid", type=int, default=200, help="validation sentences (default: 200)")
    p.add_argument("--dependency", choices=["chain", "random_tree"], default="random_tree",
                   help="dependency generator (default: random_tree)")
    p.add_argument("--marker", default="@@", help="continuation marker (default: @@)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default: 0)")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="train a model on a data directory")
    p.add_argument("--data", required=True, help="directory with train/valid files")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy decoding with a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="BPE source, one sentence per line")
    p.add_argument("--sidecar", required=True, help="structure sidecar for the input")
    p.add_argument("--out", required=True, help="hypotheses, one per line")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("dump-attention", help="write one encoder attention map as a TSV grid")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--sidecar", required=True, help="structure sidecar holding the sentence")
    p.add_argument("--sentence-index", type=int, required=True, help="0-based sentence index")
    p.add_argument("--layer", type=int, default=0, help="0-based encoder layer (default: 0)")
    p.add_argument("--head", type=int, default=0, help="0-based head (default: 0)")
    p.add_argument("--branch", choices=["1", "2", "fused"], default="fused",
                   help="sub-word map (1), word map (2) or fused (default: fused)")
    p.add_argument("--marker", default="@@", help="continuation marker for word labels")
    p.add_argument("--out", required=True, help="output TSV")
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("verify", help="run the built-in invariant suites")
    p.add_argument("--suite", choices=list(SUITES) + ["all"], default="all",
                   help="which suite to run (default: all)")
    p.add_argument("--sidecar", help="also validate this sidecar file in the structure suite")
    p.add_argument("--json", help="write the machine-readable report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="train every ablation variant under one budget")
    p.add_argument("--data", required=True, help="directory with train/valid files")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--out", required=True, help="output TSV table")
    p.add_argument("--variants", help="comma-separated subset of variant names")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
