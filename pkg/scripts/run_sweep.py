"""Run one experiment config and print the mean output SNR table.

    python scripts/run_sweep.py positional_sweep.yaml --workers 4
    python scripts/run_sweep.py vad_sweep.yaml --repetitions 3 --out results/vad
"""

import argparse
import dataclasses
import logging
import time

from dnbd.experiment import ExperimentSpec, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config", help="yaml name or path (looked up in $DNBD_CONFIG_DIR and the shipped configs)")
    ap.add_argument("--out", default="results")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--repetitions", type=int)
    ap.add_argument("--duration", type=float, help="signal length in seconds")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    spec = ExperimentSpec.load(args.config)
    if args.repetitions:
        spec = dataclasses.replace(spec, repetitions=args.repetitions)
    if args.duration:
        spec = dataclasses.replace(spec, duration_s=args.duration)

    t0 = time.perf_counter()
    out = run_experiment(spec, out_dir=args.out, workers=args.workers)
    s = out.summary()
    print(f"{spec.name}: {len(out.rows)} rows, {len(out.failures)} failed repetitions, "
          f"{time.perf_counter() - t0:.0f} s")
    print(f"{'t60':>5} {'radius':>7} {'vad':>5} {'spk':>3} " + " ".join(f"{b:>10}" for b in spec.beamformers))
    for t60 in spec.t60_s:
        for r in spec.radii_m:
            for R in spec.vad_errors:
                for k in spec.targets:
                    vals = [s.get((float(t60), float(r), float(R), b, k), float("nan")) for b in spec.beamformers]
                    print(f"{t60:5.2f} {r:7.3f} {R:5.2f} {k:3d} " + " ".join(f"{v:10.2f}" for v in vals))
    print(f"wrote {out.csv_path} and {out.dat_path}")


if __name__ == "__main__":
    main()
