"""Fine-tune with EWC / KFAC estimated from 1024, 128 and 16 task-A samples.

The lambda for each method is taken from a forgetting-study report (the
selected row) when --from is given, otherwise from --ewc / --kfac.

usage: python scripts/sample_size_study.py [clusters|charlm] [--from REPORT.json] [--out DIR]
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
    ap.add_argument("pair", nargs="?", default="charlm", choices=sorted(bench.SETUPS))
    ap.add_argument("--pair-seed", type=int, default=0)
    ap.add_argument("--from", dest="source", type=Path, default=None)
    ap.add_argument("--ewc", type=float, default=None)
    ap.add_argument("--kfac", type=float, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    lams = {}
    if args.source:
        selected = json.loads(args.source.read_text())["selected"]
        lams = {m: selected[m]["lambda"] for m in ("ewc", "kfac")}
    for m in ("ewc", "kfac"):
        if getattr(args, m) is not None:
            lams[m] = getattr(args, m)
    if set(lams) != {"ewc", "kfac"}:
        ap.error("need lambdas for ewc and kfac (use --from or --ewc/--kfac)")

    t0 = time.perf_counter()
    pair = make_pair(args.pair, args.pair_seed)
    base, _ = bench.pretrain(pair)
    rep = bench.run_sample_size_study(pair, base, lams, jobs=args.jobs)
    p = rep.payload
    for key, row in p["cells"].items():
        print(f"{key:12s} B={row['task_b_mean']:.4f} A={row['task_a_mean']:.4f}"
              f"  A/seed={[round(v, 4) for v in row['task_a']]}")
    for m, s in p["summary"].items():
        print(f"{m:5s} spread {s['spread']:.4g} = {s['spread_in_sd']:.2f} pooled sd;"
              f" largest pool beats smallest in {s['largest_beats_smallest']}/{len(p['seeds'])} seeds")
    print(f"elapsed {time.perf_counter() - t0:.0f}s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"sample_size_{args.pair}.json").write_text(dumps(rep.to_dict()))


if __name__ == "__main__":
    main()
