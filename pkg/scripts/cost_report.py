"""Cost table for the five reference networks, computed next to the published one.

    python3 scripts/cost_report.py [--scale desk] [--precision fixed16]

Also prints the averaged metrics recomputed from the published per-class rows.
"""

import argparse

from soildnet import analyzer as A
from soildnet import netspec as N
from soildnet import train as TR


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", choices=("full", "desk"), default="full")
    ap.add_argument("--precision", choices=("float32", "fixed16"), default="float32")
    args = ap.parse_args()

    hw = N.FULL_HW if args.scale == "full" else N.DESK_HW
    specs = [N.reference_spec(n, args.scale) for n in N.REFERENCE_NAMES]
    print(f"computed at {hw[0]}x{hw[1]}, {args.precision}")
    print(A.render_table(A.compare_schemes(specs, hw, args.precision)))
    print("\npublished")
    print(A.render_table(A.compare_schemes(A.published_reports())))
    print("\naverages recomputed from published per-class rows")
    print("network  " + "  ".join(f"{m:>6}" for m in TR.METRICS))
    for net in TR.PUBLISHED_CLASSWISE:
        avg = TR.published_table(net).average()
        print(f"{net:<8} " + "  ".join(f"{avg[m]:.4f}" for m in TR.METRICS))


if __name__ == "__main__":
    main()
