"""Command-line interface: corpus generation, supernet pre-training, search, training and checks.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .architecture import (
    ALL_KINDS, PRESETS as GENOME_PRESETS, Genome, GenomeError, LayerKind,
    count_params, parse_genome, preset_genome, render_genome,
)
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, TrainConfig, load_run_config
from .data import (
    N_SPECIAL, PROFILES, Corpus, CorpusError, gen_synthetic_corpus, ingest_text, load_corpus, save_corpus,
    split_train_val,
)
from .gradcheck import check_layer, check_model
from .model import TokenRangeError
from .search import SearchConfig, run_random_search, run_search
from .supernet import PathError, evaluate_mlm_accuracy, evaluate_path
from .tensor import make_rng, tune_allocator
from .train import (
    load_model, load_supernet, mask_validation, pretrain_supernet, save_model, save_supernet,
    train_model,
)
from .model import Model

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COUNT_SCOPES = ("backbone", "embeddings", "total")

RUNTIME_ERRORS = (
    CheckpointError, ConfigError, CorpusError, GenomeError, PathError, TokenRangeError, OSError, ValueError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _allowed(text: str) -> frozenset[LayerKind]:
    kinds = parse_genome(text, None) if text else Genome(ALL_KINDS)
    return frozenset(kinds)


def _genome_arg(text: str, n_layers: int) -> Genome:
    name = text.replace("-", "_")
    if name in GENOME_PRESETS:
        return preset_genome(name, n_layers)
    return parse_genome(text, n_layers)


def _split(corpus: Corpus, meta: dict, rc: RunConfig | None = None):
    frac = meta.get("val_fraction", rc.val_fraction if rc else 0.02)
    return split_train_val(corpus, frac, meta.get("split_seed", 0))


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #
def cmd_gen_corpus(args) -> int:
    if args.text:
        corpus = ingest_text(args.text, args.tokenize, args.seq_len, args.vocab - N_SPECIAL)
    else:
        corpus = gen_synthetic_corpus(args.seed, args.n, args.seq_len, args.vocab, args.profile)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} sequences of length {corpus.seq_len} (vocab {len(corpus.vocab)}) to {args.out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    return load_run_config(args.config)


def cmd_pretrain_supernet(args) -> int:
    from .supernet import Supernet

    rc = _run_config(args)
    corpus = load_corpus(args.corpus)
    _check_corpus(corpus, rc)
    train, _ = split_train_val(corpus, rc.val_fraction, args.split_seed)
    tcfg = rc.supernet if args.steps is None else _with_steps(rc.supernet, args.steps)
    init_rng = make_rng([args.seed, 0x534E])
    sn = Supernet(rc.model, init_rng)
    with _log_stream(args.log) as stream:
        pretrain_supernet(sn, train, tcfg, args.seed, stream=stream)
    save_supernet(args.out, sn, {
        "val_fraction": rc.val_fraction, "split_seed": args.split_seed, "train": _asdict(tcfg),
        "seed": args.seed,
    })
    print(f"saved supernet ({len(sn.named_parameters())} tensors) to {args.out}")
    return EXIT_OK


def _search_setup(args):
    sn, meta = load_supernet(args.supernet)
    corpus = load_corpus(args.corpus)
    _, val = _split(corpus, meta)
    if args.val_batches is not None:
        keep = min(len(val), args.val_batches * args.eval_batch)
        val = val.subset(np.arange(keep))
    vset = mask_validation(val, args.mask_seed, _train_meta(meta))

    def fitness(g: Genome) -> float:
        return evaluate_path(sn, g, vset, args.eval_batch)

    return sn, fitness


def cmd_search(args) -> int:
    scfg = SearchConfig(args.pop, args.iters, args.cro, args.mut, args.mut_prob, args.topk)
    allowed = _allowed(args.allowed)
    header = {
        "run_id": args.run_id, "population": scfg.population, "iterations": scfg.iterations,
        "top_k": scfg.top_k, "n_crossover": scfg.n_crossover, "n_mutation": scfg.n_mutation,
        "mutation_prob": scfg.mutation_prob, "seed": args.seed,
        "allowed": "".join(k.letter for k in sorted(allowed)),
    }
    print("search " + " ".join(f"{k}={v}" for k, v in header.items()), flush=True)
    sn, fitness = _search_setup(args)

    def progress(it, topk):
        print(f"iteration {it}/{scfg.iterations} best {topk[0].fitness:.6f} {render_genome(topk[0].genome)}",
              flush=True)

    result = run_search(fitness, scfg, make_rng(args.seed), sn.num_layers, allowed,
                        run_id=args.run_id, record_time=args.record_time, on_iteration=progress)
    if args.log:
        result.write_log(args.log)
    if args.out:
        Path(args.out).write_text(render_genome(result.best.genome) + "\n", encoding="utf-8")
    print(result.summary_line())
    return EXIT_OK


def cmd_random_search(args) -> int:
    allowed = _allowed(args.allowed)
    print(f"random-search run_id={args.run_id} budget={args.budget} seed={args.seed}", flush=True)
    sn, fitness = _search_setup(args)
    result = run_random_search(fitness, args.budget, make_rng(args.seed), sn.num_layers, allowed,
                               run_id=args.run_id, record_time=args.record_time)
    if args.log:
        result.write_log(args.log)
    if args.out:
        Path(args.out).write_text(render_genome(result.best.genome) + "\n", encoding="utf-8")
    print(result.summary_line())
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _run_config(args)
    genome_text = args.genome
    if Path(genome_text).is_file():
        genome_text = Path(genome_text).read_text(encoding="utf-8").strip()
    genome = _genome_arg(genome_text, rc.model.num_layers)
    corpus = load_corpus(args.corpus)
    _check_corpus(corpus, rc)
    train, _ = split_train_val(corpus, rc.val_fraction, args.split_seed)
    tcfg = rc.train if args.steps is None else _with_steps(rc.train, args.steps)
    model = Model(genome, rc.model, make_rng([args.seed, 0x4D44]))
    with _log_stream(args.log) as stream:
        train_model(model, train, tcfg, args.seed, stream=stream)
    save_model(args.out, model, {
        "val_fraction": rc.val_fraction, "split_seed": args.split_seed, "train": _asdict(tcfg), "seed": args.seed,
    })
    print(f"saved {render_genome(genome)} model to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.model)
    corpus = load_corpus(args.corpus)
    if args.split == "val":
        _, corpus = _split(corpus, meta)
    vset = mask_validation(corpus, args.mask_seed, _train_meta(meta))
    acc = evaluate_mlm_accuracy(model, vset)
    print(json.dumps({"genome": meta["genome"], "split": args.split, "sequences": len(corpus),
                      "masked_accuracy": float(f"{acc:.17g}")}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.layer == "model":
        report = check_model(args.seed, args.tol)
    else:
        report = check_layer(args.layer, args.seed, args.tol)
    status = "PASS" if report.passed else "FAIL"
    where = f" at {report.worst_index[0]}{list(int(i) for i in report.worst_index[1])}" if report.worst_index else ""
    print(f"gradcheck {args.layer} seed={args.seed}: max relative error {report.max_rel_error:.3e}"
          f"{where} over {report.n_checked} elements (tol {args.tol:g}) {status}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_params(args) -> int:
    rc = _run_config(args)
    genome = _genome_arg(args.genome, rc.model.num_layers)
    n = count_params(genome, rc.model, args.scope)
    print(f"{n} ({n / 1e6:.2f}M) {args.scope} parameters for {render_genome(genome)} under {rc.name}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #
def _check_corpus(corpus: Corpus, rc: RunConfig) -> None:
    if len(corpus.vocab) > rc.model.vocab_size:
        raise CorpusError(f"corpus vocabulary {len(corpus.vocab)} exceeds model vocab_size {rc.model.vocab_size}")
    if corpus.seq_len > rc.model.max_position:
        raise CorpusError(f"corpus sequence length {corpus.seq_len} exceeds max_position {rc.model.max_position}")


def _with_steps(tcfg, steps: int):
    from dataclasses import replace

    warmup = min(tcfg.warmup_steps, max(0, steps // 10)) if tcfg.warmup_steps >= steps else tcfg.warmup_steps
    return replace(tcfg, steps=steps, warmup_steps=warmup)


def _asdict(tcfg) -> dict:
    from dataclasses import asdict

    return asdict(tcfg)


def _train_meta(meta: dict) -> TrainConfig:
    """The masking settings a checkpoint was trained with (defaults for older files)."""
    try:
        return TrainConfig(**meta.get("train", {}))
    except TypeError as exc:
        raise CheckpointError(f"unreadable training settings in checkpoint: {exc}") from exc


class _log_stream:
    def __init__(self, path: str | None):
        self.path = path
        self.fh = None

    def __enter__(self):
        if self.path:
            self.fh = open(self.path, "w", encoding="utf-8")
        return self.fh

    def __exit__(self, *exc):
        if self.fh:
            self.fh.close()


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvnas", description="Layer-variety architecture search for masked-LM encoders.")
    p.add_argument("--version", action="version", version=f"lvnas {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus (or ingest a text file)")
    g.add_argument("--profile", choices=PROFILES, default="mixed")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=2000, help="number of sequences")
    g.add_argument("--seq-len", type=int, default=64)
    g.add_argument("--vocab", type=int, default=64, help="vocabulary size including special tokens")
    g.add_argument("--text", help="ingest this UTF-8 text file instead of generating")
    g.add_argument("--tokenize", choices=("char", "whitespace"), default="char", help="with --text: token unit")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("pretrain-supernet", help="train the weight-sharing supernet by single-path sampling")
    s.add_argument("--config", default="desk", help="preset name or JSON file")
    s.add_argument("--corpus", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--log", help="JSONL training log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_supernet)

    def search_common(q):
        q.add_argument("--supernet", required=True)
        q.add_argument("--corpus", required=True)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--log", help="JSONL evaluation history")
        q.add_argument("--out", help="file receiving the best genome")
        q.add_argument("--allowed", default="", help="restrict layer kinds, e.g. 'sf'")
        q.add_argument("--val-batches", type=int, help="evaluate on at most this many validation batches")
        q.add_argument("--eval-batch", type=int, default=64)
        q.add_argument("--mask-seed", type=int, default=0, help="seed of the fixed validation masking")
        q.add_argument("--record-time", action="store_true", help="fill wall_ms (makes logs run-dependent)")

    d = SearchConfig()
    e = sub.add_parser("search", help="evolutionary search scored by supernet MLM accuracy")
    search_common(e)
    e.add_argument("--iters", type=int, default=d.iterations)
    e.add_argument("--pop", type=int, default=d.population)
    e.add_argument("--topk", type=int, default=d.top_k)
    e.add_argument("--cro", type=int, default=d.n_crossover)
    e.add_argument("--mut", type=int, default=d.n_mutation)
    e.add_argument("--mut-prob", type=float, default=d.mutation_prob)
    e.add_argument("--run-id", default="search")
    e.set_defaults(func=cmd_search)

    r = sub.add_parser("random-search", help="budget-matched random-search baseline")
    search_common(r)
    r.add_argument("--budget", type=int, default=d.population * d.iterations)
    r.add_argument("--run-id", default="random")
    r.set_defaults(func=cmd_random_search)

    t = sub.add_parser("train", help="train one genome from scratch")
    t.add_argument("--genome", required=True, help="genome string, preset name, or file holding a genome")
    t.add_argument("--config", default="desk")
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--log", help="JSONL training log")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="masked-token accuracy of a trained model")
    v.add_argument("--model", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--split", choices=("val", "all"), default="val")
    v.add_argument("--mask-seed", type=int, default=0, help="seed of the fixed validation masking")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    c.add_argument("--layer", choices=("sa", "ff", "dc", "model"), required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("params", help="parameter count of a genome")
    m.add_argument("--genome", required=True)
    m.add_argument("--config", default="paper-small")
    m.add_argument("--scope", choices=COUNT_SCOPES, default="backbone")
    m.set_defaults(func=cmd_params)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    tune_allocator()
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"lvnas {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
