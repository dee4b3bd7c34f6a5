"""Run every config in configs/ (or the ones named) and tabulate exit codes.

    python3 scripts/run_configs.py --out runs toy order
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from odegan import cli, config

ROOT = Path(__file__).resolve().parent.parent
STATUS = {0: "ok", 2: "thresholds failed", 3: "aborted", 4: "config error"}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="config stems; default all")
    ap.add_argument("--configs", type=Path, default=ROOT / "configs")
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--skip", nargs="*", default=[], help="config stems to leave out")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    paths = [args.configs / f"{n}.cfg" for n in args.names] or sorted(args.configs.glob("*.cfg"))
    worst = 0
    for path in paths:
        if path.stem in args.skip:
            continue
        kind = config.load_file(path).get("kind")
        t0 = time.perf_counter()
        code = cli.main([str(kind), "--config", str(path), "--out", str(args.out / path.stem)])
        print(f"{path.stem:12s} {kind:13s} exit {code} ({STATUS.get(code, '?')}) {time.perf_counter() - t0:8.1f}s")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
