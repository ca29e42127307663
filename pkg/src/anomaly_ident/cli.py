"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or model error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import crf, lstm
from .episode import EpisodeFormatError, read_episodes, write_episodes
from .evaluation import METHODS, BenchmarkConfig, emit_report, run_benchmark, train_method
from .features import fit_stats
from .modelio import ModelFile, ModelFileError, dataset_fingerprint, load_model, save_model
from .pipeline import ReplayDetector, run_episode
from .simulator import generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("method options")
    g.add_argument("--epochs", type=int, default=500, help="LSTM epochs (default 500)")
    g.add_argument("--lr", type=float, default=1e-3, help="LSTM Adam learning rate (default 0.001)")
    g.add_argument("--hidden", type=int, default=64, help="LSTM hidden size (default 64)")
    g.add_argument("--grad-clip", type=float, default=5.0, help="LSTM global gradient-norm clip (default 5.0)")
    g.add_argument("--l2", type=float, default=1e-2, help="CRF L-BFGS L2 weight (default 0.01)")
    g.add_argument("--max-iters", type=int, default=200, help="CRF L-BFGS iteration cap (default 200)")
    g.add_argument("--arow-r", type=float, default=1.0, help="CRF AROW regularization r (default 1.0)")
    g.add_argument("--arow-epochs", type=int, default=10, help="CRF AROW passes (default 10)")
    g.add_argument("--smoothing", type=float, default=1.0, help="HMM additive smoothing (default 1.0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anomaly-ident", description="Anomaly cause identification for manipulation episodes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simgen", help="generate a synthetic episode file")
    p.add_argument("--dis", type=int, default=49)
    p.add_argument("--unb", type=int, default=39)
    p.add_argument("--loc", type=int, default=32)
    p.add_argument("--safe", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=1.0, help="sensor noise multiplier")
    p.add_argument("--samples-per-phase", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model on a whole episode file")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="LSTM only: write the epoch,loss,f_score table here")
    _add_method_flags(p)

    p = sub.add_parser("identify", help="run the identification loop on one episode")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episode", required=True, help="episode id")

    p = sub.add_parser("benchmark", help="repeated split / train / test protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="all", help="'all' or a comma list of " + ",".join(METHODS))
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="parallel runs (results do not depend on it)")
    p.add_argument("--out", required=True, help="report directory")
    _add_method_flags(p)
    return parser


def _config(args, methods=METHODS, runs=1, train_fraction=0.8, workers=1) -> BenchmarkConfig:
    return BenchmarkConfig(
        methods=tuple(methods),
        runs=runs,
        train_fraction=train_fraction,
        master_seed=args.seed,
        hmm_smoothing=args.smoothing,
        lbfgs=crf.LbfgsConfig(max_iters=args.max_iters, l2=args.l2),
        arow=crf.ArowConfig(r=args.arow_r, epochs=args.arow_epochs),
        lstm=lstm.LstmConfig(epochs=args.epochs, lr=args.lr, hidden=args.hidden, init_seed=args.seed,
                             grad_clip=args.grad_clip),
        workers=workers,
    )


def _parse_methods(text: str) -> list[str]:
    if text == "all":
        return list(METHODS)
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    return methods


def cmd_simgen(args) -> int:
    counts = (args.dis, args.unb, args.loc, args.safe)
    if min(counts) < 0:
        raise UsageError("episode counts must be non-negative")
    episodes = generate_dataset(*counts, seed=args.seed, noise_level=args.noise,
                                samples_per_phase=args.samples_per_phase)
    write_episodes(episodes, args.out)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    episodes = read_episodes(args.data)
    if not episodes:
        raise ValueError(f"{args.data} contains no episodes")
    stats = fit_stats(episodes)
    config = _config(args, methods=[args.method])
    cfg = config.to_dict()
    labeler, info = train_method(args.method, episodes, stats, config, args.seed)
    model = labeler.params if args.method == "lstm" else labeler
    method_cfg = {"hmm": "hmm_smoothing", "crf-lbfgs": "lbfgs", "crf-arow": "arow", "lstm": "lstm"}[args.method]
    mf = ModelFile(args.method, stats, model, {"seed": args.seed, method_cfg: cfg[method_cfg]},
                   dataset_fingerprint(episodes))
    save_model(args.out, mf)
    if args.curve and "curve" in info:
        with open(args.curve, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,f_score\n")
            for p in info["curve"]:
                fh.write(f"{p['epoch']},{p['loss']:.6f},{p['f_score']:.6f}\n")
    print(f"trained {args.method} on {len(episodes)} episodes; model written to {args.out}")
    return EXIT_OK


def cmd_identify(args) -> int:
    mf = load_model(args.model)
    episodes = {ep.id: ep for ep in read_episodes(args.data)}
    if args.episode not in episodes:
        raise ValueError(f"episode {args.episode!r} not found in {args.data}")
    result = run_episode(mf.labeler(), ReplayDetector(), episodes[args.episode])
    sys.stdout.write(f"episode: {args.episode}\n" + result.to_text())
    return EXIT_OK


def cmd_benchmark(args) -> int:
    methods = _parse_methods(args.methods)
    if args.runs < 1:
        raise UsageError("--runs must be positive")
    if not 0.0 < args.train_frac < 1.0:
        raise UsageError("--train-frac must lie strictly between 0 and 1")
    episodes = read_episodes(args.data)
    config = _config(args, methods, args.runs, args.train_frac, args.workers)
    report = run_benchmark(episodes, config, dataset_fingerprint(episodes))
    for path in emit_report(report, args.out):
        print(path)
    return EXIT_OK


COMMANDS = {"simgen": cmd_simgen, "train": cmd_train, "identify": cmd_identify, "benchmark": cmd_benchmark}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except lstm.LstmDivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (EpisodeFormatError, ModelFileError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
