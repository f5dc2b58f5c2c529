"""Run the mode counter experiments and print one table row per instance.

    python3 scripts/run_mce.py --out runs/mce [--seed 0] [--only blind]
"""

import argparse
import logging
import os
import time

from moorenet.config import preset
from moorenet.pipeline import Pipeline, render_markdown

INSTANCES = ("amnesia-8-8", "blind-8-4", "tracker-8-8")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/mce")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", nargs="*", help="instance names, e.g. blind tracker")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    docs = []
    for name in INSTANCES:
        if args.only and name.split("-")[0] not in args.only:
            continue
        cfg = preset(name).with_seed(args.seed)
        t0 = time.time()
        docs.append(Pipeline(cfg, os.path.join(args.out, f"{name}-s{args.seed}")).run())
        print(f"{name}: {time.time() - t0:.0f} s", flush=True)
    table = render_markdown(docs)
    with open(os.path.join(args.out, f"mce-s{args.seed}.md"), "w") as fh:
        fh.write(table)
    print(table)


if __name__ == "__main__":
    main()
