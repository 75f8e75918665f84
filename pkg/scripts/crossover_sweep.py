"""Sweep arrival rate and compare serving policies on request latency.

At low rates every request runs nearly alone, so the full tensor split and
its cheap single-row decode steps win.  At high rates the batch is wide,
compute per step is shared, and the sequence split's smaller exchanges win
on throughput.  The shifting policy picks its arrangement per step and
should track whichever static layout is ahead at every rate.
"""

import argparse
import csv
import sys

from shiftsim.sim import (
    CostModel, SchedulerConfig, TraceParams, generate_trace, simulate,
    summarize,
)
from shiftsim.topology import ModelConfig, ParallelConfig

POLICIES = ("sp-only", "tp-only", "shift")

LARGE = ModelConfig(layers=32, hidden=4096, mlp_hidden=11008, q_heads=32,
                    kv_heads=32, head_dim=128, vocab=32000, max_ctx=4096)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="0.5,1,2,4,8,16,32",
                    help="comma-separated arrival rates, requests/s")
    ap.add_argument("--n", type=int, default=48, help="requests per rate")
    ap.add_argument("--prompt-len", type=int, default=128)
    ap.add_argument("--output-len", type=int, default=64)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--csv", action="store_true",
                    help="emit CSV instead of the aligned table")
    args = ap.parse_args()

    pc = ParallelConfig(sp=8, tp=1)
    cost, sched = CostModel(), SchedulerConfig(token_budget=256)
    rates = [float(r) for r in args.rates.split(",")]

    writer = csv.writer(sys.stdout) if args.csv else None
    header = ["rate"] + [f"{p}_latency_s" for p in POLICIES] + ["shift/best"]
    if writer:
        writer.writerow(header)
    else:
        print("median request latency, seconds")
        print("".join(f"{h:>18}" for h in header))
    for rate in rates:
        trace = generate_trace(TraceParams(
            kind="steady", n_requests=args.n, rate=rate,
            prompt_len=args.prompt_len, output_len=args.output_len,
            seed=args.seed))
        med = {}
        for policy in POLICIES:
            summary = summarize(simulate(LARGE, pc, policy, trace, cost,
                                         sched))
            med[policy] = summary["latency_median_s"]
        ratio = med["shift"] / min(med["sp-only"], med["tp-only"])
        row = [rate] + [med[p] for p in POLICIES] + [ratio]
        if writer:
            writer.writerow([f"{v:.6f}" for v in row])
        else:
            print("".join(f"{v:>18.4f}" for v in row))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
