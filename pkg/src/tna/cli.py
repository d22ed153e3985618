"""``tna`` command line: estimate, analyze, cluster, validate, compare, simulate, verify.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, pipeline
from .config import AnalysisConfig, config_from_dict, load_config, validate
from .errors import ConfigError, TNAError

log = logging.getLogger("tna")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the copy attached to subcommands must not reset values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML analysis config", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides config)", **kw)
    p.add_argument("--out-dir", help="output directory (overrides config)", **kw)
    p.add_argument("--scaling", choices=["stochastic", "frequency", "count"], **kw)
    p.add_argument("--threads", type=int, help="worker threads for EM restarts", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="tna", description="Transition network analysis of coded event logs.",
                                     parents=[_global_flags(suppress=False)])
    parser.add_argument("--version", action="version", version=f"tna {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("estimate", parents=[common], help="sessionize and estimate the transition model")
    a = sub.add_parser("analyze", parents=[common], help="centralities, dyads, cliques, communities")
    a.add_argument("--bundle", help="reuse the model from an estimate bundle")
    a.add_argument("--dyad-threshold", type=float)
    a.add_argument("--clique-threshold", type=float)
    a.add_argument("--clique-size", type=int)
    a.add_argument("--gamma", type=float, help="spin-glass resolution")
    c = sub.add_parser("cluster", parents=[common], help="mixture Markov clustering with BIC selection")
    c.add_argument("--k", type=int, nargs="+", help="cluster counts to try")
    c.add_argument("--restarts", type=int)
    sub.add_parser("validate", parents=[common], help="bootstrap, disparity filter and stability")
    cmp_ = sub.add_parser("compare", parents=[common], help="subtraction network and permutation test")
    cmp_.add_argument("--group-column")
    sub.add_parser("simulate", parents=[common], help="write a synthetic event log")
    v = sub.add_parser("verify", parents=[common], help="check a bundle's self-consistency")
    v.add_argument("bundle")
    return parser


def _config(args) -> AnalysisConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    elif args.config:
        cfg.out_dir = str(cfg.resolve(cfg.out_dir))
    if args.scaling is not None:
        cfg.scaling = args.scaling
    if args.threads is not None:
        cfg.threads = args.threads
    if getattr(args, "dyad_threshold", None) is not None:
        cfg.patterns.dyad_threshold = args.dyad_threshold
    if getattr(args, "clique_threshold", None) is not None:
        cfg.patterns.clique_threshold = args.clique_threshold
    if getattr(args, "clique_size", None) is not None:
        cfg.patterns.clique_size = args.clique_size
    if getattr(args, "gamma", None) is not None:
        cfg.communities.gamma = args.gamma
    if getattr(args, "k", None):
        cfg.mixture.k_range = list(args.k)
    if getattr(args, "restarts", None) is not None:
        cfg.mixture.restarts = args.restarts
    if getattr(args, "group_column", None):
        cfg.compare.group_column = args.group_column
    validate(cfg)
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            problems = pipeline.verify_bundle(args.bundle)
            for p in problems:
                print(f"FAIL {p}")
            if problems:
                return 3
            print(f"OK {args.bundle}")
            return 0
        cfg = _config(args)
        if args.command == "estimate":
            out = pipeline.run_estimate(cfg)
        elif args.command == "analyze":
            out = pipeline.run_analyze(cfg, args.bundle)
        elif args.command == "cluster":
            out = pipeline.run_cluster(cfg)
        elif args.command == "validate":
            out = pipeline.run_validate(cfg)
        elif args.command == "compare":
            out = pipeline.run_compare(cfg)
        elif args.command == "simulate":
            out = pipeline.run_simulate(cfg)
        else:  # pragma: no cover - argparse rejects unknown commands
            raise ConfigError(f"unknown command {args.command}")
    except TNAError as exc:
        print(f"tna {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(out)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
