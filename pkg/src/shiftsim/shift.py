"""Dynamic switching between a base (sp, tp) arrangement and full tensor
parallelism over the same workers and the same KV caches.

The base arrangement splits large batches along the sequence dimension; the
full tensor-parallel arrangement serves small batches at lower latency.  Both
can coexist because the worker that sits at position r of the base head
layout owns exactly the query heads of tensor-rank block r in the full-TP
layout, so each worker's cache slice is valid under either arrangement and a
switch moves no KV bytes.  Loading the full-TP shards therefore assigns
tensor ranks by base layout position rather than by worker id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import count

import numpy as np

from .collectives import CommLedger
from .errors import ConfigError, UnsupportedConfigError, VerificationError
from .model import Weights, argmax_token, reference_decode_step, reference_prefill
from .model import Sequence
from .parallel import CacheStore, ParallelEngine
from .topology import ModelConfig, ParallelConfig

BASE = "base"
SHIFT = "shift"

_probe_ids = count()


def choose_branch(n_rows: int, threshold: int) -> str:
    """Pure dispatch rule: big batches ride the base arrangement."""
    if n_rows < 1:
        raise ConfigError("batch must have at least one row")
    return BASE if n_rows > threshold else SHIFT


@dataclass(frozen=True)
class WeightFootprint:
    """Resident layer-weight elements per worker, both arrangements counted."""

    base_per_worker: int
    shift_per_worker: int  # 0 when the arrangements share one copy
    model_layer_elements: int

    @property
    def total_per_worker(self) -> int:
        return self.base_per_worker + self.shift_per_worker

    @property
    def overhead_fraction(self) -> float:
        return self.shift_per_worker / self.base_per_worker


class ShiftEngine:
    """One model served by two arrangements that share caches and workers."""

    def __init__(self, mc: ModelConfig, pc: ParallelConfig, weights: Weights,
                 *, apply_head_order: bool = True, fuse_qkv: bool = True):
        self.mc, self.pc, self.weights = mc, pc, weights
        self.threshold = pc.shift_threshold
        self.ledger = CommLedger()
        self.cache_store = CacheStore()
        self._lengths: dict[str, int] = {}
        self.base = ParallelEngine(
            mc, pc, weights, cache_store=self.cache_store,
            ledger=self.ledger, fuse_qkv=fuse_qkv, lengths=self._lengths)
        if pc.sp == 1:
            # the base arrangement already is full tensor parallelism
            self.shift = self.base
        else:
            order = self.base.topo.sp_tp_order if apply_head_order \
                else tuple(range(pc.p))
            self.shift = ParallelEngine(
                mc, ParallelConfig(1, pc.p), weights, worker_ids=order,
                cache_store=self.cache_store, ledger=self.ledger,
                fuse_qkv=fuse_qkv, lengths=self._lengths)
        self.trace: list[dict] = []
        self._step_idx = 0

    def engine(self, branch: str) -> ParallelEngine:
        if branch == BASE:
            return self.base
        if branch == SHIFT:
            return self.shift
        raise ConfigError(f"unknown branch {branch!r}")

    def dispatch(self, n_rows: int) -> str:
        return choose_branch(n_rows, self.threshold)

    def footprint(self) -> WeightFootprint:
        base_pw = self.base.resident_weight_elements(0)
        for lw in range(self.pc.p):
            if self.base.resident_weight_elements(lw) != base_pw:
                raise ConfigError("uneven base shards")
        if self.shift is self.base:
            shift_pw = 0
        else:
            shift_pw = self.shift.resident_weight_elements(0)
        return WeightFootprint(
            base_per_worker=base_pw,
            shift_per_worker=shift_pw,
            model_layer_elements=self.weights.layer_elements(),
        )

    # -- serving -----------------------------------------------------------

    def prefill(self, request: str, token_ids, *, via: str | None = None):
        ids = list(token_ids)
        branch = via if via is not None else self.dispatch(len(ids))
        snap = self.ledger.snapshot()
        tok, logits = self.engine(branch).prefill(request, ids)
        self._record(branch, len(ids), snap)
        return tok, logits

    def decode_step(self, last_tokens: dict[str, int], *,
                    via: str | None = None):
        branch = via if via is not None else self.dispatch(len(last_tokens))
        snap = self.ledger.snapshot()
        out = self.engine(branch).decode_step(last_tokens)
        self._record(branch, len(last_tokens), snap)
        return out

    def _record(self, branch: str, rows: int, snap) -> None:
        self.trace.append({
            "step": self._step_idx,
            "branch": branch,
            "rows": rows,
            "volumes": dict(sorted(self.ledger.volumes_since(snap).items())),
        })
        self._step_idx += 1

    def trace_text(self) -> str:
        return "".join(json.dumps(entry, sort_keys=True) + "\n"
                       for entry in self.trace)

    def drop_request(self, request: str) -> None:
        self.cache_store.drop_request(request)
        self._lengths.pop(request, None)


def load_shift_engine(mc: ModelConfig, pc: ParallelConfig, weights: Weights,
                      *, apply_head_order: bool = True,
                      fuse_qkv: bool = True) -> ShiftEngine:
    """Build both arrangements over one worker set.

    Bases that replicate KV across sequence ranks while also splitting
    tensors are refused: their full-TP twin cannot be laid over the same
    cache slices one-to-one.
    """
    if pc.sp > mc.kv_heads and pc.tp > 1:
        raise UnsupportedConfigError(
            f"shift over base sp={pc.sp} tp={pc.tp} with kv_heads="
            f"{mc.kv_heads} would replicate KV across sequence ranks"
        )
    return ShiftEngine(mc, pc, weights, apply_head_order=apply_head_order,
                       fuse_qkv=fuse_qkv)


def check_kv_invariance(engine: ShiftEngine, *, prompt=None,
                        decode_steps: int = 4) -> str:
    """Prove a branch switch moves no KV and changes no output.

    Structural check: every worker must own the same query heads and hold
    the same KV heads under both arrangements.  Operational check: a probe
    request prefilled on one branch and decoded on alternating branches must
    reproduce the single-process reference tokens, and the cache slices left
    behind must match the reference cache.  Raises VerificationError with a
    per-worker diff on any mismatch.
    """
    lines = []
    diffs = []
    base_q = engine.base.q_heads_by_worker()
    shift_q = engine.shift.q_heads_by_worker()
    base_kv = engine.base.kv_heads_by_worker()
    shift_kv = engine.shift.kv_heads_by_worker()
    for w in sorted(base_q):
        if base_q[w] != shift_q[w]:
            diffs.append(f"worker {w}: base q heads {base_q[w]}, "
                         f"shift loads {shift_q[w]}")
        if base_kv[w] != shift_kv[w]:
            diffs.append(f"worker {w}: base kv heads {base_kv[w]}, "
                         f"shift holds {shift_kv[w]}")
    if diffs:
        raise VerificationError(
            "head layout mismatch between arrangements:\n" + "\n".join(diffs))
    lines.append(f"layout: {engine.pc.p} workers own identical q and kv "
                 "heads under both arrangements")

    ids = list(prompt) if prompt is not None else [3, 17, 5, 9, 21, 2]
    w = engine.weights
    ref_logits, ref_cache = reference_prefill(w, Sequence(tuple(ids)))
    ref_tok = argmax_token(ref_logits[-1])
    ref_tokens = [ref_tok]
    for _ in range(decode_steps):
        ref_tok, ref_cache = reference_decode_step(w, ref_cache, ref_tok)
        ref_tokens.append(ref_tok)

    for first in (BASE, SHIFT):
        probe = f"__invariance_probe_{next(_probe_ids)}"
        tok, _ = engine.prefill(probe, ids, via=first)
        got = [tok]
        branch = SHIFT if first == BASE else BASE
        for _ in range(decode_steps):
            tok = engine.decode_step({probe: tok}, via=branch)[probe][0]
            got.append(tok)
            branch = BASE if branch == SHIFT else SHIFT
        if got != ref_tokens:
            raise VerificationError(
                f"alternating decode after {first} prefill produced {got}, "
                f"reference says {ref_tokens}")
        _check_probe_cache(engine, probe, ref_cache)
        engine.drop_request(probe)
        lines.append(f"switching: prefill via {first}, alternating decode "
                     f"reproduced {len(got)} reference tokens")
    lines.append("caches: per-worker slices match the reference cache "
                 "after both runs")
    return "\n".join(lines) + "\n"


def _check_probe_cache(engine: ShiftEngine, probe: str, ref_cache) -> None:
    mc = engine.mc
    kv_by_worker = engine.base.kv_heads_by_worker()
    for pid, heads in sorted(kv_by_worker.items()):
        cache = engine.cache_store.peek(pid, probe)
        if cache is None:
            raise VerificationError(f"worker {pid} holds no cache slice")
        for layer in range(mc.layers):
            for g in heads:
                if cache.positions(layer, g) != ref_cache.positions(layer, g):
                    raise VerificationError(
                        f"worker {pid} layer {layer} kv head {g}: positions "
                        f"{cache.positions(layer, g)} != reference "
                        f"{ref_cache.positions(layer, g)}")
                diff = np.max(np.abs(cache.k_matrix(layer, g)
                                     - ref_cache.k_matrix(layer, g)))
                if diff >= 1e-4:
                    raise VerificationError(
                        f"worker {pid} layer {layer} kv head {g}: max K "
                        f"deviation {diff:.2e} exceeds 1e-4")
