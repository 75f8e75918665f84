"""Command line front end.

Subcommands:
  verify    build a deployment, print its head layout, and prove that the
            base and full-TP arrangements agree with the reference model
            and share KV caches; exits 1 if any check fails
  bench     tabulate per-step compute and communication elements for the
            base and full-TP arrangements across batch sizes
  simulate  run traffic through the serving simulator and write metrics

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .errors import ConfigError, ShiftSimError, VerificationError
from .model import (
    Sequence, Weights, argmax_token, reference_decode_step, reference_prefill,
)
from .parallel import ParallelEngine
from .shift import check_kv_invariance, load_shift_engine
from .sim import (
    CostModel, SchedulerConfig, TraceParams, generate_trace, load_trace,
    metrics_text, save_request_csv, save_trace, simulate, step_elements,
    summarize,
)
from .sim import POLICIES
from .topology import ModelConfig, ParallelConfig, build_topology

PRESETS = {
    "tiny": dict(layers=2, hidden=8, mlp_hidden=16, q_heads=4, kv_heads=2,
                 head_dim=2, vocab=32, max_ctx=256),
    "gqa": dict(layers=2, hidden=16, mlp_hidden=32, q_heads=8, kv_heads=2,
                head_dim=2, vocab=32, max_ctx=256),
    "mha": dict(layers=2, hidden=16, mlp_hidden=32, q_heads=8, kv_heads=8,
                head_dim=2, vocab=32, max_ctx=256),
    # 7B-class shape for the traffic simulator; far too large to execute
    "large": dict(layers=32, hidden=4096, mlp_hidden=11008, q_heads=32,
                  kv_heads=32, head_dim=128, vocab=32000, max_ctx=4096),
}

VERIFY_PROMPT = [3, 17, 5, 9, 21, 2, 11, 30, 7, 14, 8, 26]


def _model_from_args(args) -> ModelConfig:
    spec = dict(PRESETS[args.model])
    for name in ("layers", "q_heads", "kv_heads", "head_dim", "vocab",
                 "mlp_hidden", "max_ctx"):
        value = getattr(args, name, None)
        if value is not None:
            spec[name] = value
    spec["hidden"] = spec["q_heads"] * spec["head_dim"]
    return ModelConfig(**spec)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=sorted(PRESETS), default="tiny",
                   help="model preset (default: tiny)")
    p.add_argument("--layers", type=int, help="override layer count")
    p.add_argument("--q-heads", dest="q_heads", type=int,
                   help="override query head count")
    p.add_argument("--kv-heads", dest="kv_heads", type=int,
                   help="override kv head count")
    p.add_argument("--head-dim", dest="head_dim", type=int,
                   help="override head width")
    p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int,
                   help="override mlp width")
    p.add_argument("--vocab", type=int, help="override vocab size")
    p.add_argument("--max-ctx", dest="max_ctx", type=int,
                   help="override context capacity")
    p.add_argument("--seed", type=int, default=0, help="weight seed")


def _add_parallel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sp", type=int, default=2, help="sequence degree")
    p.add_argument("--tp", type=int, default=1, help="tensor degree")
    p.add_argument("--threshold", type=int, default=0,
                   help="rows at or below which the full-TP arrangement "
                        "runs (default: worker count)")


def cmd_verify(args) -> int:
    mc = _model_from_args(args)
    pc = ParallelConfig(args.sp, args.tp, shift_threshold=args.threshold)
    w = Weights.from_seed(mc, args.seed)
    print(build_topology(mc, pc).to_text(), end="")

    eng = ParallelEngine(mc, pc, w)
    logits_ref, cache = reference_prefill(w, Sequence(tuple(VERIFY_PROMPT)))
    tok_ref = argmax_token(logits_ref[-1])
    tok, logits = eng.prefill("verify", VERIFY_PROMPT)
    diff = float(np.max(np.abs(logits - logits_ref[-1])))
    if diff >= 1e-4 or tok != tok_ref:
        raise VerificationError(
            f"prefill deviates from reference: max |dlogit| = {diff:.2e}")
    last_ref, last = tok_ref, tok
    for _ in range(4):
        last_ref, cache = reference_decode_step(w, cache, last_ref)
        last = eng.decode_step({"verify": last})["verify"][0]
        if last != last_ref:
            raise VerificationError("decode tokens diverge from reference")
    print(f"equivalence: sp={pc.sp} tp={pc.tp} matches the reference model "
          f"(max |dlogit| = {diff:.2e}, 5 tokens)")

    shift = load_shift_engine(
        mc, pc, w, apply_head_order=not args.skip_head_order)
    print(check_kv_invariance(shift), end="")
    print("verify: all checks passed")
    return 0


def cmd_bench(args) -> int:
    mc = _model_from_args(args)
    pc = ParallelConfig(args.sp, args.tp)
    rows_list = [int(r) for r in args.rows.split(",")]
    if any(r < 1 for r in rows_list):
        raise ConfigError("row counts must be >= 1")
    arrangements = [("base", pc.sp, pc.tp), ("full-tp", 1, pc.p)]
    out = csv.writer(sys.stdout)
    out.writerow(["phase", "rows", "arrangement", "sp", "tp",
                  "compute_elements", "comm_elements"])
    for n in rows_list:
        for phase in ("prefill", "decode"):
            if phase == "prefill":
                reqs = [(n, 0)]
                n_samp = 1
            else:
                reqs = [(1, args.ctx)] * n
                n_samp = n
            for name, sp, tp in arrangements:
                compute, comm = step_elements(mc, sp, tp, reqs, n_samp)
                out.writerow([phase, n, name, sp, tp, compute, comm])
    return 0


def cmd_simulate(args) -> int:
    mc = _model_from_args(args)
    pc = ParallelConfig(args.sp, args.tp, shift_threshold=args.threshold)
    if args.trace_file:
        trace = load_trace(args.trace_file)
    else:
        trace = generate_trace(TraceParams(
            kind=args.trace, n_requests=args.n, rate=args.rate,
            prompt_len=args.prompt_len, output_len=args.output_len,
            seed=args.seed, bursts=args.bursts,
            burst_factor=args.burst_factor, len_jitter=args.jitter))
    cost = CostModel(compute_rate=args.compute_rate,
                     bandwidth=args.bandwidth,
                     step_overhead=args.overhead)
    sched = SchedulerConfig(token_budget=args.budget)
    policies = list(POLICIES) if args.policy == "all" else [args.policy]

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_trace(os.path.join(args.out, "trace.csv"), trace)
    for policy in policies:
        result = simulate(mc, pc, policy, trace, cost, sched)
        text = metrics_text(summarize(result))
        if args.out:
            stem = policy.replace("-", "_")
            with open(os.path.join(args.out, f"metrics_{stem}.txt"), "w") as f:
                f.write(text)
            save_request_csv(
                os.path.join(args.out, f"requests_{stem}.csv"), result)
        print(f"== {policy} ==")
        print(text, end="")
    if args.out:
        print(f"wrote {args.out}/")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shiftsim",
        description="simulated tensor/sequence-parallel transformer serving")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="check arrangement equivalence and "
                                      "cache invariance")
    _add_model_args(v)
    _add_parallel_args(v)
    v.add_argument("--skip-head-order", action="store_true",
                   help="fault injection: load full-TP shards in natural "
                        "worker order (the checker must catch this)")
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="per-step cost table")
    _add_model_args(b)
    _add_parallel_args(b)
    b.add_argument("--rows", default="1,2,4,8,16,32,64",
                   help="comma-separated batch row counts")
    b.add_argument("--ctx", type=int, default=128,
                   help="cached context length for decode rows")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("simulate", help="run traffic through the simulator")
    _add_model_args(s)
    _add_parallel_args(s)
    s.add_argument("--policy", choices=list(POLICIES) + ["all"],
                   default="all")
    s.add_argument("--trace", choices=["steady", "bursty", "batch"],
                   default="steady")
    s.add_argument("--trace-file", help="load arrivals from a trace CSV "
                                        "instead of generating")
    s.add_argument("--n", type=int, default=96, help="request count")
    s.add_argument("--rate", type=float, default=8.0,
                   help="requests per second")
    s.add_argument("--bursts", type=int, default=4)
    s.add_argument("--burst-factor", dest="burst_factor", type=float,
                   default=8.0)
    s.add_argument("--prompt-len", dest="prompt_len", type=int, default=128)
    s.add_argument("--output-len", dest="output_len", type=int, default=64)
    s.add_argument("--jitter", type=float, default=0.0)
    s.add_argument("--budget", type=int, default=256,
                   help="max rows per step")
    s.add_argument("--compute-rate", dest="compute_rate", type=float,
                   default=CostModel.compute_rate,
                   help="elements per second per worker")
    s.add_argument("--bandwidth", type=float, default=CostModel.bandwidth,
                   help="exchanged elements per second per worker")
    s.add_argument("--overhead", type=float, default=CostModel.step_overhead,
                   help="fixed seconds per step")
    s.add_argument("--out", help="directory for metrics and per-request CSV")
    s.set_defaults(fn=cmd_simulate, model="large", sp=8)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VerificationError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return 1
    except ShiftSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
