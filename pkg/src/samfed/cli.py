"""Command line entry point: ``generate``, ``run`` and ``eval``.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration problem.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .data import Style, generate_synthetic, load_pgm_dataset, write_pgm_dataset
from .errors import (
    BadCheckpoint,
    ConfigError,
    FingerprintMismatch,
    InvalidSize,
    LabelOutOfRange,
    MalformedPgm,
    MissingPair,
)
from .federation import evaluate_model, run_experiment
from .models import SegModel, SegNet, infer_config, load_checkpoint

log = logging.getLogger("samfed")


class UsageError(Exception):
    """Problem with the invocation itself; maps to exit code 2."""


def cmd_generate(args) -> int:
    try:
        data = generate_synthetic(args.n, args.size, Style(args.style), args.noise, args.seed)
    except InvalidSize as exc:
        raise UsageError(str(exc)) from None
    write_pgm_dataset(args.out, data)
    print(f"wrote {len(data)} pairs to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["output"] = args.out
    cfg = cfg.replace(**changes)
    out = Path(cfg.output)
    res = run_experiment(cfg, out)
    if res.reports:
        m = res.reports[-1].means()
        print(f"final round {res.reports[-1].round}: dice {m['dice']:.4f} hd95 {m['hd95']:.3f} "
              f"agreement {m['agreement_rate']:.4f}")
    print(f"artifacts in {out}")
    return 0


def _eval_pairs(ckpt: Path, data: Path) -> list[tuple[str, Path, Path]]:
    """(name, checkpoint, dataset dir) triples for a file or a run's ckpt directory."""
    if ckpt.is_dir():
        pairs = []
        for p in sorted(ckpt.glob("C*.bin"), key=lambda p: int(p.stem[1:]) if p.stem[1:].isdigit() else 0):
            d = data / p.stem
            if not d.is_dir():
                raise UsageError(f"no test data for {p.stem} under {data}")
            pairs.append((p.stem, p, d))
        if not pairs:
            raise UsageError(f"no client checkpoints in {ckpt}")
        return pairs
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    return [(ckpt.stem, ckpt, data)]


def cmd_eval(args) -> int:
    rows = []
    for name, ckpt, data_dir in _eval_pairs(Path(args.ckpt), Path(args.data)):
        params = load_checkpoint(ckpt)
        data = load_pgm_dataset(data_dir, params["head.w"].shape[-1] if "head.w" in params else 2)
        if not data:
            raise UsageError(f"{data_dir}: no images")
        cfg = infer_config(params, data[0][0].shape)
        res = evaluate_model(SegModel(cfg, params, SegNet(cfg)), data)
        rows.append((name, res.dice, res.hd95))
    print(f"{'model':<10}{'dice':>12}{'hd95':>12}")
    for name, d, h in rows:
        print(f"{name:<10}{d:>12.6f}{h:>12.6f}")
    if len(rows) > 1:
        print(f"{'mean':<10}{np.mean([r[1] for r in rows]):>12.6f}{np.mean([r[2] for r in rows]):>12.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="samfed", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic PGM dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--style", choices=[s.value for s in Style], default="blob")
    g.add_argument("--noise", type=float, default=0.12)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run a federated experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--threads", type=int)
    r.add_argument("--out", help="override the config's output directory")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="score checkpoints on PGM datasets")
    e.add_argument("--ckpt", required=True, help="checkpoint file, or a run's ckpt/ directory")
    e.add_argument("--data", required=True, help="PGM dataset, or a run's test/ directory")
    e.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, FingerprintMismatch, BadCheckpoint, MissingPair,
            MalformedPgm, LabelOutOfRange) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
