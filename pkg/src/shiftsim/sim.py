"""Discrete-event serving simulator over the executor's cost shapes.

Requests arrive over time, a FIFO continuous-batching scheduler packs decode
rows and chunked prefill rows into steps, and each step is priced by closed
forms that mirror the executor's compute and communication accounting
element for element (a calibration test holds them to the real ledger).
Policies differ only in the arrangement they run a step under: the base
(sp, tp) split, full tensor parallelism, or the dynamic shift rule.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .shift import BASE, SHIFT, choose_branch
from .topology import ModelConfig, ParallelConfig, Topology, build_topology

POLICIES = ("sp-only", "tp-only", "shift")


@dataclass(frozen=True)
class Request:
    request: str
    arrival: float
    prompt_len: int
    output_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ConfigError("prompt_len and output_len must be >= 1")
        if self.arrival < 0:
            raise ConfigError("arrival must be >= 0")


@dataclass(frozen=True)
class CostModel:
    """Per-worker element rates; a step costs overhead + compute + transfer.

    Defaults put interconnect three decimal orders below arithmetic, the
    usual shape of a multi-accelerator host, with a fixed dispatch cost per
    step.
    """

    compute_rate: float = 1e12  # matmul elements per second per worker
    bandwidth: float = 1e9      # exchanged elements per second per worker
    step_overhead: float = 1e-4  # fixed seconds per step

    def __post_init__(self):
        if self.compute_rate <= 0 or self.bandwidth <= 0:
            raise ConfigError("rates must be positive")
        if self.step_overhead < 0:
            raise ConfigError("step_overhead must be >= 0")


@dataclass(frozen=True)
class SchedulerConfig:
    token_budget: int = 64  # max rows packed into one step

    def __post_init__(self):
        if self.token_budget < 1:
            raise ConfigError("token_budget must be >= 1")


@dataclass(frozen=True)
class TraceParams:
    kind: str  # "steady", "bursty", or "batch"
    n_requests: int
    rate: float = 1.0          # requests per second (steady / bursty quiet phase)
    prompt_len: int = 128
    output_len: int = 64
    seed: int = 0
    bursts: int = 4            # bursty: number of quiet/burst cycles
    burst_factor: float = 8.0  # bursty: burst arrival rate multiplier
    len_jitter: float = 0.0    # +-fraction applied to both lengths

    def __post_init__(self):
        if self.kind not in ("steady", "bursty", "batch"):
            raise ConfigError(f"unknown trace kind {self.kind!r}")
        if self.n_requests < 1:
            raise ConfigError("n_requests must be >= 1")
        if self.rate <= 0 or self.burst_factor < 1 or self.bursts < 1:
            raise ConfigError("rate, bursts, burst_factor must be positive")
        if not 0 <= self.len_jitter < 1:
            raise ConfigError("len_jitter must be in [0, 1)")


def generate_trace(params: TraceParams) -> list[Request]:
    """Deterministic arrival schedule; jitter draws are seed-reproducible."""
    rng = np.random.default_rng(params.seed)
    arrivals: list[float] = []
    if params.kind == "batch":
        arrivals = [0.0] * params.n_requests
    elif params.kind == "steady":
        arrivals = [i / params.rate for i in range(params.n_requests)]
    else:
        # each cycle: half the cycle's requests trickle at the quiet rate,
        # the other half slam in at rate * burst_factor right after
        per_cycle = params.n_requests // params.bursts
        extra = params.n_requests - per_cycle * params.bursts
        t = 0.0
        for cycle in range(params.bursts):
            n_cycle = per_cycle + (1 if cycle < extra else 0)
            n_quiet = n_cycle // 2
            for _ in range(n_quiet):
                arrivals.append(t)
                t += 1.0 / params.rate
            for _ in range(n_cycle - n_quiet):
                arrivals.append(t)
                t += 1.0 / (params.rate * params.burst_factor)
    out = []
    for i, arrival in enumerate(arrivals):
        p_len, o_len = params.prompt_len, params.output_len
        if params.len_jitter > 0:
            lo, hi = 1 - params.len_jitter, 1 + params.len_jitter
            p_len = max(1, int(round(p_len * rng.uniform(lo, hi))))
            o_len = max(1, int(round(o_len * rng.uniform(lo, hi))))
        out.append(Request(f"req{i:05d}", arrival, p_len, o_len))
    return out


def save_trace(path: str, trace: list[Request]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["request", "arrival", "prompt_len", "output_len"])
        for r in trace:
            w.writerow([r.request, repr(r.arrival), r.prompt_len,
                        r.output_len])


def load_trace(path: str) -> list[Request]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["request", "arrival", "prompt_len", "output_len"]:
        raise ConfigError(f"{path} is not a trace file")
    return [Request(r[0], float(r[1]), int(r[2]), int(r[3]))
            for r in rows[1:]]


# -- step cost, mirrored from the executor's ledger accounting -------------

@lru_cache(maxsize=None)
def _topo(mc: ModelConfig, sp: int, tp: int) -> Topology:
    return build_topology(mc, ParallelConfig(sp, tp))


def step_elements(mc: ModelConfig, sp: int, tp: int,
                  reqs: list[tuple[int, int]], n_samp: int) -> tuple[int, int]:
    """Aggregate (compute, communicated) elements of one step over all workers.

    `reqs` lists (new_rows, cached_rows) per request in the step; padding to
    a multiple of sp is added here, exactly as the executor pads.  Every
    count reproduces the executor's metering: matmuls as rows*inner*cols,
    all-to-all as elements sent to peers, all-gather as shard times peers,
    all-reduce as the ring's two passes over ceil-divided chunks.
    """
    topo = _topo(mc, sp, tp)
    d, hd, h = mc.hidden, mc.head_dim, mc.q_heads
    kv_local = len(topo.tp_kv_slices[0])
    n = sum(r for r, _ in reqs)
    if n < 1:
        raise ConfigError("step needs at least one row")
    n_pad = ((n + sp - 1) // sp) * sp
    pads = n_pad - n
    rows_w = n_pad // sp
    qkv_cols = (h // tp + 2 * kv_local) * hd

    compute = 0
    compute += tp * n_pad * d * qkv_cols                      # qkv projection
    attn = sum(2 * r * hd * (c + r) for r, c in reqs) + pads * 2 * hd
    compute += h * attn                                       # attention
    compute += n_pad * d * d                                  # output proj
    compute += 2 * n_pad * d * mc.mlp_hidden                  # mlp
    compute *= mc.layers
    compute += sp * tp * n_samp * d * mc.vocab                # lm head

    comm = 0
    if sp > 1:
        if topo.sp_ag == 1:
            comm += (sp - 1) * n_pad * qkv_cols // sp * tp
        else:
            comm += tp * (sp - 1) * n_pad * (h // tp) * hd // sp
            if topo.sp_aa > 1:
                comm += 2 * tp * n_pad * kv_local * hd \
                    * (topo.sp_aa - 1) // topo.sp_aa
            comm += 2 * tp * n_pad * kv_local * hd * (topo.sp_ag - 1)
        comm += n_pad * d * (sp - 1) // sp                    # attention a2a
    if tp > 1:
        chunk = -(-rows_w * d // tp)
        comm += 2 * (sp * tp * 2 * (tp - 1) * chunk)          # o + mlp reduce
    comm *= mc.layers
    if sp > 1:
        comm += tp * n_samp * d * (sp - 1)                    # sampled gather
    return compute, comm


def step_time(cost: CostModel, p: int, compute: int, comm: int) -> float:
    return (cost.step_overhead + compute / (p * cost.compute_rate)
            + comm / (p * cost.bandwidth))


# -- simulation -------------------------------------------------------------

@dataclass
class RequestResult:
    request: str
    arrival: float
    first_token_time: float
    completion_time: float
    prompt_len: int
    output_len: int

    @property
    def ttft(self) -> float:
        return self.first_token_time - self.arrival

    @property
    def tpot(self) -> float | None:
        if self.output_len < 2:
            return None
        return ((self.completion_time - self.first_token_time)
                / (self.output_len - 1))


@dataclass(frozen=True)
class StepLog:
    start: float
    duration: float
    branch: str
    sp: int
    tp: int
    rows: int
    compute: int
    comm: int


@dataclass
class SimResult:
    policy: str
    requests: list[RequestResult]
    steps: list[StepLog]
    token_times: list[float] = field(repr=False, default_factory=list)

    @property
    def makespan(self) -> float:
        return max(r.completion_time for r in self.requests)


@dataclass
class _Live:
    req: Request
    prefilled: int = 0   # prompt rows already in cache
    emitted: int = 0     # output tokens produced
    first_token: float = -1.0


def _arrangement(policy: str, pc: ParallelConfig, n_rows: int) -> tuple[str, int, int]:
    if policy == "sp-only":
        return BASE, pc.sp, pc.tp
    if policy == "tp-only":
        return SHIFT, 1, pc.p
    if policy == "shift":
        branch = choose_branch(n_rows, pc.shift_threshold)
        return (BASE, pc.sp, pc.tp) if branch == BASE else (SHIFT, 1, pc.p)
    raise ConfigError(f"unknown policy {policy!r}; pick one of {POLICIES}")


def simulate(mc: ModelConfig, pc: ParallelConfig, policy: str,
             trace: list[Request], cost: CostModel,
             sched: SchedulerConfig | None = None) -> SimResult:
    """FIFO continuous batching: decode rows first, then prefill chunks."""
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}; pick one of {POLICIES}")
    sched = sched if sched is not None else SchedulerConfig()
    order = sorted(trace, key=lambda r: (r.arrival, r.request))
    arriving = deque(order)
    prefill_q: deque[_Live] = deque()
    decode_q: deque[_Live] = deque()
    done: list[RequestResult] = []
    steps: list[StepLog] = []
    token_times: list[float] = []
    t = 0.0

    def finish(live: _Live, now: float) -> None:
        done.append(RequestResult(
            request=live.req.request, arrival=live.req.arrival,
            first_token_time=live.first_token, completion_time=now,
            prompt_len=live.req.prompt_len, output_len=live.req.output_len))

    while len(done) < len(trace):
        while arriving and arriving[0].arrival <= t:
            prefill_q.append(_Live(arriving.popleft()))
        if not prefill_q and not decode_q:
            t = arriving[0].arrival
            continue

        budget = sched.token_budget
        reqs: list[tuple[int, int]] = []
        decode_now: list[_Live] = []
        prefill_now: list[tuple[_Live, int]] = []
        for live in list(decode_q):
            if budget == 0:
                break
            decode_now.append(live)
            reqs.append((1, live.req.prompt_len + live.emitted))
            budget -= 1
        for live in list(prefill_q):
            if budget == 0:
                break
            chunk = min(live.req.prompt_len - live.prefilled, budget)
            prefill_now.append((live, chunk))
            reqs.append((chunk, live.prefilled))
            budget -= chunk

        n_rows = sum(r for r, _ in reqs)
        branch, sp, tp = _arrangement(policy, pc, n_rows)
        compute, comm = step_elements(mc, sp, tp, reqs, n_samp=len(reqs))
        dt = step_time(cost, pc.p, compute, comm)
        steps.append(StepLog(start=t, duration=dt, branch=branch, sp=sp,
                             tp=tp, rows=n_rows, compute=compute, comm=comm))
        t += dt

        for live in decode_now:
            live.emitted += 1
            token_times.append(t)
            if live.emitted == live.req.output_len:
                decode_q.remove(live)
                finish(live, t)
        for live, chunk in prefill_now:
            live.prefilled += chunk
            if live.prefilled == live.req.prompt_len:
                prefill_q.remove(live)
                live.first_token = t
                live.emitted = 1
                token_times.append(t)
                if live.emitted == live.req.output_len:
                    finish(live, t)
                else:
                    decode_q.append(live)

    done.sort(key=lambda r: r.request)
    return SimResult(policy=policy, requests=done, steps=steps,
                     token_times=token_times)


# -- reporting --------------------------------------------------------------

def nearest_rank(values: list[float], pct: float) -> float:
    """Classic nearest-rank percentile: value at ceil(pct/100 * n)."""
    if not values:
        raise ConfigError("no values to rank")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize(result: SimResult, window: float = 1.0) -> dict:
    ttfts = [r.ttft for r in result.requests]
    latencies = [r.completion_time - r.arrival for r in result.requests]
    tpots = [r.tpot for r in result.requests if r.tpot is not None]
    out_tokens = sum(r.output_len for r in result.requests)
    all_tokens = out_tokens + sum(r.prompt_len for r in result.requests)
    makespan = result.makespan

    peak = 0
    if result.token_times:
        times = sorted(result.token_times)
        windows = int(math.floor(times[-1] / window)) + 1
        counts = [0] * windows
        for tt in times:
            counts[min(int(tt / window), windows - 1)] += 1
        peak = max(counts)

    summary = {
        "policy": result.policy,
        "requests": len(result.requests),
        "output_tokens": out_tokens,
        "makespan_s": makespan,
        "ttft_median_s": nearest_rank(ttfts, 50),
        "ttft_p99_s": nearest_rank(ttfts, 99),
        "latency_median_s": nearest_rank(latencies, 50),
        "latency_p99_s": nearest_rank(latencies, 99),
        "throughput_tok_s": out_tokens / makespan,
        "combined_tok_s": all_tokens / makespan,
        "peak_window_tok_s": peak / window,
        "steps": len(result.steps),
        "base_steps": sum(1 for s in result.steps if s.branch == BASE),
        "shift_steps": sum(1 for s in result.steps if s.branch == SHIFT),
    }
    if tpots:
        summary["tpot_median_s"] = nearest_rank(tpots, 50)
        summary["tpot_p99_s"] = nearest_rank(tpots, 99)
    return summary


def metrics_text(summary: dict) -> str:
    lines = []
    for key, value in summary.items():
        if isinstance(value, float):
            lines.append(f"{key} {value:.6f}")
        else:
            lines.append(f"{key} {value}")
    return "\n".join(lines) + "\n"


def save_request_csv(path: str, result: SimResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["request", "arrival", "ttft", "tpot", "completion",
                    "prompt_len", "output_len"])
        for r in result.requests:
            tpot = f"{r.tpot:.9f}" if r.tpot is not None else ""
            w.writerow([r.request, f"{r.arrival:.9f}", f"{r.ttft:.9f}", tpot,
                        f"{r.completion_time:.9f}", r.prompt_len,
                        r.output_len])
