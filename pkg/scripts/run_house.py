"""House sequence: normalised Hamming loss against frame baseline.

Needs the frames (``house.seq0`` .. ``house.seq110``, one ``x y`` row per
landmark) in a directory:

    python3 scripts/run_house.py data/house -o out/house
"""

import argparse
import logging
import os
import sys
import time

from loopmatch.bench import ExperimentConfig, emit_plot_data, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("data_dir")
    ap.add_argument("-o", "--outdir", default="out/house")
    ap.add_argument("--baselines", type=int, nargs="+", default=list(range(10, 100, 10)))
    ap.add_argument("--p", type=int, nargs="+", default=[10])
    ap.add_argument("--methods", nargs="+", default=["linear", "higher", "linear_unlearned", "higher_unlearned"])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if not os.path.isdir(args.data_dir):
        sys.exit(f"run_house: no such directory: {args.data_dir}")

    cfg = ExperimentConfig(
        experiment="house",
        data_dir=args.data_dir,
        methods=tuple(args.methods),
        p=tuple(args.p),
        loss="hamming",
        baselines=tuple(args.baselines),
    )
    t0 = time.perf_counter()
    report = run_experiment(cfg)
    paths = emit_plot_data(report, args.outdir)
    report.write_csv(f"{args.outdir}/report.csv")
    for r in report.rows:
        print(f"{r.method:18s} {r.condition:20s} {r.mean_loss:.4f} +- {r.std_error:.4f}  {r.runtime_ms:7.1f} ms")
    print(f"{time.perf_counter() - t0:.0f} s; wrote {', '.join(paths)}")


if __name__ == "__main__":
    main()
