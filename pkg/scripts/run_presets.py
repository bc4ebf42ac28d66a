"""Run one or more bundled experiment presets and write their reports.

    python scripts/run_presets.py fig2 table1 --jobs 4 --root runs
"""

import argparse
import os
import sys

from curvkan.cli import PRESETS, main


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("presets", nargs="*", default=list(PRESETS))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--root", default="runs", help="parent directory for every preset's output")
    return p.parse_args()


if __name__ == "__main__":
    args = parse()
    status = 0
    for name in args.presets:
        out = os.path.join(args.root, name)
        print(f"== {name} -> {out}", flush=True)
        status = max(status, main(["sweep", name, "--jobs", str(args.jobs), "--output", out]))
    sys.exit(status)
