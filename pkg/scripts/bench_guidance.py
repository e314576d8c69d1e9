"""Time one full training step under soft vs denoised guidance across
diffusion horizons, and print the soft/denoised ratio per horizon.

The denoised mode backpropagates through every reverse diffusion step, so its
cost grows with T while the soft mode's stays flat.

Usage:
    python3 scripts/bench_guidance.py --T 5 10 20 50 100
"""

import argparse
import json

from dac.bench import bench_guidance


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, nargs="+", default=[5, 10, 20, 50, 100])
    ap.add_argument("--reps", type=int, default=15)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args()

    rows = bench_guidance(t_values=tuple(args.T), reps=args.reps)
    print(f"{'T':>4} {'soft ms':>9} {'denoised ms':>12} {'ratio':>7}")
    for row in rows:
        print(f"{row['T']:>4} {row['soft_s'] * 1e3:>9.2f} "
              f"{row['denoised_s'] * 1e3:>12.2f} {row['ratio']:>7.3f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
