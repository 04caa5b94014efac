"""Storage and timing of each curvature on square d x d layers.

usage: python scripts/cost_study.py [--dims 16,32,64,128] [--samples 256] [--out DIR]
"""
import argparse
import json
from pathlib import Path

from bayespeft import bench
from bayespeft.serialize import dumps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dims", default="16,32,64,128")
    ap.add_argument("--samples", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    dims = [int(d) for d in args.dims.split(",")]
    rep = bench.run_cost_study(dims, args.samples, args.seed)
    times = {(t["method"], t["d"]): t for t in rep.sidecar["timings"]}
    print(f"{'method':6s} {'d':>5s} {'storage':>8s} {'estimate_s':>11s} {'penalty_s':>11s}")
    for row in rep.payload["layers"]:
        t = times[(row["method"], row["d_out"])]
        print(f"{row['method']:6s} {row['d_out']:5d} {row['storage']:8d} {t['estimate_s']:11.2e} {t['penalty_s']:11.2e}")
    print("storage ratio per doubling:", json.dumps(rep.payload["storage_ratio_per_doubling"]))
    print("fitted time exponents:", json.dumps(rep.sidecar["exponents"]))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "cost.json").write_text(dumps(rep.to_dict()))


if __name__ == "__main__":
    main()
