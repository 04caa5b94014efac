"""Pre-train on task A, then compare none / L2-SP / EWC / KFAC fine-tuning on task B.

usage: python scripts/forgetting_study.py [clusters|charlm] [--jobs N] [--out DIR]
"""
import argparse
import json
import time
from pathlib import Path

from bayespeft import bench
from bayespeft.data import make_pair
from bayespeft.serialize import dumps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("pair", nargs="?", default="clusters", choices=sorted(bench.SETUPS))
    ap.add_argument("--pair-seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    t0 = time.perf_counter()
    pair = make_pair(args.pair, args.pair_seed)
    base, pre = bench.pretrain(pair)
    print("pre-trained:", json.dumps(pre))
    rep = bench.run_forgetting_study(pair, base, jobs=args.jobs)
    p = rep.payload
    print(f"forgetting gap {p['forgetting']['gap']:.4g}  pooled sd {p['forgetting']['pooled_sd']:.4g}"
          f"  z {p['forgetting']['z']:.2f}")
    for row in p["sweep"]:
        print(f"{row['method']:5s} lam={row['lambda']:<10.4g} B={row['task_b_mean']:.4f}"
              f" A={row['task_a_mean']:.4f}  A/seed={[round(v, 4) for v in row['task_a']]}")
    for m, r in p["selected"].items():
        extra = "" if m == "none" else f" recovery {p['recovery'][m]:.2f}  dB {p['task_b_change'][m]:+.4f}"
        print(f"selected {m:5s} lam={r['lambda']:.4g} B={r['task_b_mean']:.4f} A={r['task_a_mean']:.4f}{extra}")
    print("ordering:", p["ordering"])
    print(f"elapsed {time.perf_counter() - t0:.0f}s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"forgetting_{args.pair}.json").write_text(dumps(rep.to_dict()))


if __name__ == "__main__":
    main()
