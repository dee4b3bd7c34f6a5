"""Command line entry point: ``odegan <experiment> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import config as cfgmod
from .experiments import EXIT_CONFIG, run

log = logging.getLogger("odegan")

HELP = {
    "toy": "integrate the two-parameter rotational game with Euler and Heun",
    "order-test": "fit global-error slopes against the closed-form toy solution",
    "mog": "train a small GAN on a 2-d mixture of Gaussians",
    "reg-sweep": "repeat the mixture run over several regulariser weights",
    "eigen-check": "randomised spectrum and structure checks",
    "linear-probe": "analyse user supplied A, B, C blocks",
}


def _blocks_file(path: str) -> dict:
    """Read a blocks file: JSON with keys a, b, c, or ``a = [[...]]`` lines."""
    text = open(path).read()
    try:
        import json

        data = json.loads(text)
    except ValueError:
        data = cfgmod.parse_text(text, path)
    try:
        return {f"linear.{k}": np.asarray(data[k], dtype=np.float64).tolist() for k in ("a", "b", "c")}
    except KeyError as exc:
        raise cfgmod.ConfigError(f"{path}: missing block {exc.args[0]!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odegan", description="GAN training as ODE integration: experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in cfgmod.KINDS:
        sp = sub.add_parser(kind, help=HELP[kind])
        sp.add_argument("--config", help="structured-text config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (overrides $%s and the config)" % cfgmod.OUTPUT_ENV)
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        if kind == "reg-sweep":
            sp.add_argument("--parallel", type=int, default=None, help="run N sweep points concurrently")
        if kind == "linear-probe":
            sp.add_argument("--blocks", help="file holding the A, B, C blocks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        file_values = cfgmod.load_file(args.config) if args.config else {}
        overrides = cfgmod.parse_overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "blocks", None):
            overrides.update(_blocks_file(args.blocks))
        cfg = cfgmod.build(args.kind, file_values, overrides)
        out_dir = cfg.output_dir(args.out)
        kw = {"parallel": args.parallel} if args.kind == "reg-sweep" else {}
        summary = run(cfg, out_dir, **kw)
    except (cfgmod.ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    for c in summary.checks:
        log.info("%s %s: %s (threshold %s)", "PASS" if c.passed else "FAIL", c.name, c.value, c.threshold)
    status = "aborted" if summary.aborted else ("passed" if summary.passed else "failed")
    log.info("%s: %s, outputs in %s", cfg.kind, status, out_dir)
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
