"""Run the acceptance suite and print one PASS/FAIL line per criterion.

    python3 scripts/acceptance.py          # all criteria, about 10 minutes on one core
    python3 scripts/acceptance.py --quick  # skip the two full training criteria
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="deselect tests marked slow")
    args = ap.parse_args(argv)
    extra = ["-m", "not slow"] if args.quick else []
    return pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", "--rootdir", str(ROOT), *extra])


if __name__ == "__main__":
    sys.exit(main())
