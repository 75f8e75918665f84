"""Measure per-layer exchange volumes as the worker grid grows.

Runs one prefill per arrangement on a small multi-head model and reads the
first layer's traffic back out of the communication ledger: all-to-all
volume for sequence splits, all-reduce volume for tensor splits, next to
the compute spent.  The sequence side follows n*d*(sp-1)/sp while the
tensor side grows linearly with the group, which is the whole story of why
wide batches prefer sequence splits.
"""

import argparse

from shiftsim.collectives import CommLedger
from shiftsim.model import Weights
from shiftsim.parallel import ParallelEngine
from shiftsim.topology import ModelConfig, ParallelConfig


def layer0_totals(mc, pc, prompt, tags):
    w = Weights.from_seed(mc, 3)
    ledger = CommLedger()
    ParallelEngine(mc, pc, w, ledger=ledger).prefill("r", prompt)
    comm = sum(ledger.sent(tag=t, layer=0, worker=wk)
               for t in tags for wk in range(pc.p))
    compute = sum(ledger.compute(layer=0, worker=wk) for wk in range(pc.p))
    return comm, compute


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16, help="prompt rows")
    args = ap.parse_args()

    mc = ModelConfig(layers=2, hidden=16, mlp_hidden=32, q_heads=8,
                     kv_heads=8, head_dim=2, vocab=32, max_ctx=max(64, args.n))
    prompt = [(7 * i + 3) % mc.vocab for i in range(args.n)]
    n_d = args.n * mc.hidden

    print(f"n={args.n} d={mc.hidden} (layer 0 volumes, elements)")
    print(f"{'arrangement':>12} {'comm':>8} {'compute':>10} "
          f"{'comm/compute':>14}")
    for sp in (2, 4, 8):
        comm, compute = layer0_totals(
            mc, ParallelConfig(sp, 1), prompt, ("qkv_a2a", "attn_a2a"))
        attn, _ = layer0_totals(
            mc, ParallelConfig(sp, 1), prompt, ("attn_a2a",))
        note = f"attn a2a {attn} == n*d*(sp-1)/sp {n_d * (sp - 1) // sp}"
        print(f"{'sp=' + str(sp):>12} {comm:>8} {compute:>10} "
              f"{comm / compute:>14.5f}  {note}")
    for tp in (2, 4, 8):
        comm, compute = layer0_totals(
            mc, ParallelConfig(1, tp), prompt, ("o_ar", "mlp_ar"))
        print(f"{'tp=' + str(tp):>12} {comm:>8} {compute:>10} "
              f"{comm / compute:>14.5f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
