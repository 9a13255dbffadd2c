"""GOPS against depth for fixed M = N, one line per precision, as CSV.

Also prints the t(w,a)/t(1,1) time ratios at the deepest K, which should
track w*a once the per-call overhead is amortized.

    python scripts/depth_sweep.py --mn 256 --k 64..4096 --wa 1x1,2x2,3x3 > depth.csv
"""

import argparse
import sys

from bsqnn.bench import SweepSpec, parse_dims, parse_wa, run_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mn", type=int, default=256)
    p.add_argument("--k", default="64..4096")
    p.add_argument("--wa", default="1x1,2x2")
    p.add_argument("--engines", default="bsgemm,byte")
    p.add_argument("--repeat-seconds", type=float, default=0.5)
    args = p.parse_args()
    spec = SweepSpec(m=(args.mn,), n=(args.mn,), k=parse_dims(args.k), wa=parse_wa(args.wa),
                     engines=tuple(args.engines.split(",")), repeat_seconds=args.repeat_seconds)
    rows = run_sweep(spec, sys.stdout, sys.stderr)
    deepest = max(spec.k)
    base = {r["engine"]: r["ns"] for r in rows if r["K"] == deepest and (r["w"], r["a"]) == (1, 1)}
    for r in rows:
        if r["K"] == deepest and r["engine"] in base:
            print(f"{r['engine']} W{r['w']}A{r['a']} K={deepest}: "
                  f"t/t(1,1) = {r['ns'] / base[r['engine']]:.2f} (w*a = {r['w'] * r['a']})",
                  file=sys.stderr)


if __name__ == "__main__":
    main()
