"""Run all seven Tomita grammars and print the accuracy / machine size table.

    python3 scripts/run_tomita.py --out runs/tomita [--bh 16] [--grammars 1 3 5]
"""

import argparse
import logging
import os
import time

from moorenet.config import preset
from moorenet.pipeline import Pipeline, render_markdown


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/tomita")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bh", type=int, default=16)
    ap.add_argument("--grammars", type=int, nargs="*", default=list(range(1, 8)))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    docs = []
    start = time.time()
    for g in args.grammars:
        cfg = preset(f"tomita{g}-{args.bh}").with_seed(args.seed)
        t0 = time.time()
        docs.append(Pipeline(cfg, os.path.join(args.out, f"{cfg.name}-s{args.seed}")).run())
        print(f"grammar {g}: {time.time() - t0:.0f} s", flush=True)
    table = render_markdown(docs)
    with open(os.path.join(args.out, f"tomita-{args.bh}-s{args.seed}.md"), "w") as fh:
        fh.write(table)
    print(table)
    print(f"total {time.time() - start:.0f} s")


if __name__ == "__main__":
    main()
