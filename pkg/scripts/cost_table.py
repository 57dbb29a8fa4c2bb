"""Compare predicted per-frame transmission costs with what the simulator logs.

For each network size the script runs a few all-noise frames of the
message-passing simulator and prints the reals sent per steady-state frame
and bin, below the analytic table.
"""

import argparse

from dnbd.metrics import format_costs
from dnbd.network import Scheme, predict_costs
from dnbd.verify import ledger_reals


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=6, help="microphones per node")
    ap.add_argument("--S", type=int, default=2, help="speakers")
    ap.add_argument("--J", type=int, nargs="+", default=[2, 4, 6, 8])
    args = ap.parse_args()

    print(format_costs(predict_costs(4, args.N, args.S)))
    print()
    print(f"{'J':>3} {'mode':>13} {'centralized':>12} {'dnds':>6} {'dnbd':>6}")
    for J in args.J:
        for mode in ("nonrecursive", "recursive"):
            c = ledger_reals(J, args.N, args.S, Scheme.CENTRALIZED, mode)[1]
            d = ledger_reals(J, args.N, args.S, Scheme.DNDS, mode)[1]
            b = ledger_reals(J, args.N, args.S, Scheme.DNBD, mode)[1]
            print(f"{J:3d} {mode:>13} {c:12d} {d:6d} {b:6d}")


if __name__ == "__main__":
    main()
