"""Command-line entry point: ``mambafusion <command> [flags]``.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
Every error is reported as one ``error kind=... msg=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import checkpoint
from .config import ConfigError, build, load_config
from .equivalence import scan_equivalence
from .flops import DEFAULT_RESOLUTIONS, DEFAULT_TEXT_LENS, sweep, write_csv
from .gradsuite import END_TO_END_TOL, OP_TOL, run_suite
from .pan import PanConfig
from .toy.train import TrainConfig, TrainingDiverged, ablate, train, write_ablation

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error kind={kind} msg={json.dumps(str(msg))}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pan_config(path, seed):
    raw = load_config(path) if path else {}
    return build(PanConfig, raw, seed=seed if seed is not None else int(raw.get("seed", 0)))


def _train_config(path, seed, **over):
    raw = load_config(path) if path else {}
    if seed is not None:
        over["seed"] = seed
    return build(TrainConfig, raw, **over)


def cmd_gradcheck(args) -> int:
    ok = True
    for name, rep, secs in run_suite(args.seed or 0, args.tol, args.e2e_tol, args.eps):
        print(f"{name:24s} {rep} [{secs:.2f}s]")
        ok &= rep.passed
    print("gradcheck: all passed" if ok else "gradcheck: FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_scan_equiv(args) -> int:
    rep = scan_equivalence(args.seed or 0, args.instances)
    status = "PASS" if rep.passed(args.tol) else "FAIL"
    print(f"{status} max abs diff = {rep.max_abs_diff:.3e} over {rep.instances} instances (worst: {rep.worst})")
    return EXIT_OK if rep.passed(args.tol) else EXIT_CHECK


def cmd_flops_sweep(args) -> int:
    res = DEFAULT_RESOLUTIONS if args.resolutions is None else args.resolutions
    lens = DEFAULT_TEXT_LENS if args.text_lens is None else args.text_lens
    if not res or not lens:
        raise UsageError("flops-sweep needs at least one resolution and one text length")
    if min(res) < 1 or min(lens) < 0:
        raise UsageError("resolutions must be >= 1 and text lengths >= 0")
    rows = sweep(res, lens, _pan_config(args.config, args.seed))
    write_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = _train_config(args.config, args.seed)
    t = time.perf_counter()
    res = train(cfg, args.out)
    if args.checkpoint:
        checkpoint.save(res.model, args.checkpoint)
    for h in res.history:
        print(f"step {h['step']:5d} loss {h['loss']:.6f} val_acc {h['val_acc']:.4f}")
    print(f"final val_acc {res.metrics['val_acc']:.4f} toy_ap {res.metrics['toy_ap']:.4f} [{time.perf_counter() - t:.1f}s]")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _train_config(args.config, None)
    seed = args.seed if args.seed is not None else base.seed
    rows = ablate(base, seeds=(seed, seed + 1, seed + 2))
    write_ablation(rows, args.out)
    for r in rows:
        print(f"t2i={r['t2i']} i2t={r['i2t']} seed={r['seed']} val_acc={r['val_acc']:.4f} toy_ap={r['toy_ap']:.4f}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    p = _Parser(prog="mambafusion", description="Guided selective-scan fusion: checks, FLOPs sweep, toy detector.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    g.add_argument("--tol", type=float, default=OP_TOL)
    g.add_argument("--e2e-tol", type=float, default=END_TO_END_TOL)
    g.add_argument("--eps", type=float, default=1e-6)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("scan-equiv", parents=[common], help="sequential vs chunked vs oracle scan")
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-10)
    s.set_defaults(func=cmd_scan_equiv)

    f = sub.add_parser("flops-sweep", parents=[common], help="MAC counts of both necks over a resolution grid")
    f.add_argument("--out", required=True)
    f.add_argument("--resolutions", type=int, nargs="*", default=None)
    f.add_argument("--text-lens", type=int, nargs="*", default=None)
    f.add_argument("--config", default=None, help="neck config (key=value file)")
    f.set_defaults(func=cmd_flops_sweep)

    t = sub.add_parser("train-toy", parents=[common], help="train the toy detector")
    t.add_argument("--config", default=None)
    t.add_argument("--out", default=None, help="metrics CSV path")
    t.add_argument("--checkpoint", default=None, help="write final weights here")
    t.set_defaults(func=cmd_train_toy)

    a = sub.add_parser("ablate", parents=[common], help="2x2 fusion-flag ablation over three seeds")
    a.add_argument("--config", default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as exc:
        print(parser.format_usage(), end="")
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except TrainingDiverged as exc:
        return _fail("diverged", exc, EXIT_CHECK)
    except checkpoint.CheckpointError as exc:
        return _fail("io", exc, EXIT_IO)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except ValueError as exc:
        return _fail("usage", exc, EXIT_USAGE)


run = main

if __name__ == "__main__":
    sys.exit(main())
