"""Multi-worker transformer execution under combined (SP, TP) sharding.

One engine simulates p = sp * tp workers, each on its own thread with its own
weight shards and its own KV-cache slice.  A forward step follows the same
layer recipe as the reference model, with four communication points:

  1. rows are sliced across sequence ranks before the first layer;
  2. after the local QKV projection, an all-to-all within each sequence
     group trades row shards for head shards (when the tensor slice holds
     fewer KV heads than the group needs, the KV part becomes a two-stage
     all-to-all + all-gather that replicates each head's full sequence);
  3. a second all-to-all trades attention outputs back to row shards, then
     the output projection partial sums are all-reduced across tensor ranks;
  4. MLP partial sums are all-reduced, and final rows needed for sampling
     are gathered across sequence ranks.

A degenerate (sp=1, tp=1) engine makes no collective calls and reproduces
the reference model bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .collectives import (
    CommFabric, CommLedger, all_gather, all_reduce, all_to_all, run_spmd,
)
from .errors import ConfigError, NumericsError, UnsupportedConfigError
from .model import (
    ShardedKVCache, Weights, _embed_rows, argmax_token, attend_head, silu,
)
from .tensor_ops import Matrix, concat_cols, matmul, split_cols
from .topology import ModelConfig, ParallelConfig, Topology, build_topology


@dataclass(frozen=True)
class BatchRow:
    """One token row of an engine step; request None marks padding."""

    request: str | None
    token: int
    position: int

    @property
    def is_pad(self) -> bool:
        return self.request is None


PAD_ROW = BatchRow(request=None, token=0, position=0)


def pad_batch(rows: list[BatchRow], sp: int) -> tuple[list[BatchRow], list[bool]]:
    """Pad to a multiple of sp so row slices are equal; mask marks real rows.

    Pad rows flow through every kernel (their garbage is cheap and keeps all
    workers in lockstep) but are excluded from attention contexts of real
    rows, from cache writes, and from sampling.
    """
    if not rows:
        raise ConfigError("cannot pad an empty batch")
    if sp < 1:
        raise ConfigError("sp must be >= 1")
    target = ((len(rows) + sp - 1) // sp) * sp
    padded = list(rows) + [PAD_ROW] * (target - len(rows))
    return padded, [not r.is_pad for r in padded]


class CacheStore:
    """Cache slices per (physical worker, request).

    A slice is created with the exact KV head set its worker owns; any later
    access with a different head set is a layout fault and fails loudly,
    which is what makes cross-arrangement cache reuse self-checking.
    """

    def __init__(self):
        self._slices: dict[tuple[int, str], ShardedKVCache] = {}
        self._lock = threading.Lock()

    def slice_for(self, worker: int, request: str, mc: ModelConfig,
                  heads: tuple[int, ...]) -> ShardedKVCache:
        key = (worker, request)
        with self._lock:
            cache = self._slices.get(key)
            if cache is None:
                cache = ShardedKVCache(mc, heads=heads)
                self._slices[key] = cache
            elif cache.heads != tuple(sorted(heads)):
                raise ConfigError(
                    f"cache slice head mismatch on worker {worker}: slice "
                    f"holds kv heads {cache.heads}, access wants {tuple(sorted(heads))}"
                )
            return cache

    def peek(self, worker: int, request: str) -> ShardedKVCache | None:
        with self._lock:
            return self._slices.get((worker, request))

    def requests(self) -> list[str]:
        with self._lock:
            return sorted({r for (_, r) in self._slices})

    def drop_request(self, request: str) -> None:
        with self._lock:
            for key in [k for k in self._slices if k[1] == request]:
                del self._slices[key]


@dataclass
class _WorkerShards:
    """Per-worker weight slices; embedding tables are replicated."""

    qkv: list[Matrix]
    o: list[Matrix]
    up: list[Matrix]
    down: list[Matrix]

    def elements(self) -> int:
        return sum(
            m.size for group in (self.qkv, self.o, self.up, self.down)
            for m in group
        )


def _slice_shards(w: Weights, topo: Topology, lw: int) -> _WorkerShards:
    mc, tp = topo.mc, topo.pc.tp
    hd = mc.head_dim
    t = topo.tp_rank(lw)
    q_block = range(t * (mc.q_heads // tp), (t + 1) * (mc.q_heads // tp))
    kv_slice = topo.tp_kv_slices[t]

    def qkv_slice(m: Matrix) -> Matrix:
        cols = []
        for q in q_block:
            cols.append(m[:, q * hd:(q + 1) * hd])
        for g in kv_slice:
            c = (mc.q_heads + g) * hd
            cols.append(m[:, c:c + hd])
        for g in kv_slice:
            c = (mc.q_heads + mc.kv_heads + g) * hd
            cols.append(m[:, c:c + hd])
        return np.ascontiguousarray(np.hstack(cols))

    mlp_w = mc.mlp_hidden // tp
    return _WorkerShards(
        qkv=[qkv_slice(m) for m in w.qkv],
        o=[np.ascontiguousarray(
            m[q_block.start * hd:q_block.stop * hd, :]) for m in w.o],
        up=[np.ascontiguousarray(
            m[:, t * mlp_w:(t + 1) * mlp_w]) for m in w.up],
        down=[np.ascontiguousarray(
            m[t * mlp_w:(t + 1) * mlp_w, :]) for m in w.down],
    )


@dataclass(frozen=True)
class _StepPlan:
    """Shared read-only description of one padded batch."""

    rows: tuple[BatchRow, ...]
    groups: tuple[tuple[str, tuple[int, ...]], ...]  # request -> row indices
    pad_rows: tuple[int, ...]
    sampling: tuple[tuple[str, int], ...]  # request -> global row index


def _plan_step(rows: list[BatchRow], sp: int) -> _StepPlan:
    padded, _ = pad_batch(rows, sp)
    groups: dict[str, list[int]] = {}
    pad_rows = []
    for idx, row in enumerate(padded):
        if row.is_pad:
            pad_rows.append(idx)
        else:
            groups.setdefault(row.request, []).append(idx)
    for request, idxs in groups.items():
        positions = [padded[i].position for i in idxs]
        if positions != list(range(positions[0], positions[0] + len(idxs))):
            raise ConfigError(
                f"rows of request {request} must be consecutive positions"
            )
    sampling = tuple((request, idxs[-1]) for request, idxs in groups.items())
    return _StepPlan(
        rows=tuple(padded),
        groups=tuple((r, tuple(ix)) for r, ix in groups.items()),
        pad_rows=tuple(pad_rows),
        sampling=sampling,
    )


class ParallelEngine:
    """A (sp, tp) deployment of one model over simulated workers.

    `worker_ids` names the physical worker behind each local rank; passing a
    reordering is how a full tensor-parallel arrangement is laid over workers
    that keep cache slices from a different arrangement.
    """

    def __init__(self, mc: ModelConfig, pc: ParallelConfig, weights: Weights,
                 *, worker_ids=None, cache_store: CacheStore | None = None,
                 ledger: CommLedger | None = None,
                 fabric: CommFabric | None = None, fuse_qkv: bool = True,
                 lengths: dict[str, int] | None = None):
        if weights.mc != mc:
            raise ConfigError("weights were built for a different model config")
        if mc.mlp_hidden % pc.tp != 0:
            raise UnsupportedConfigError(
                f"mlp_hidden={mc.mlp_hidden} not divisible by tp={pc.tp}"
            )
        self.mc, self.pc, self.weights = mc, pc, weights
        self.topo = build_topology(mc, pc)
        self.worker_ids = tuple(worker_ids) if worker_ids is not None \
            else tuple(range(pc.p))
        if sorted(self.worker_ids) != list(range(pc.p)):
            raise ConfigError("worker_ids must be a permutation of 0..p-1")
        self.cache_store = cache_store if cache_store is not None else CacheStore()
        self.ledger = ledger if ledger is not None else CommLedger()
        self.fabric = fabric if fabric is not None else CommFabric()
        self.fuse_qkv = fuse_qkv
        self.shards = [_slice_shards(weights, self.topo, lw)
                       for lw in range(pc.p)]
        # shared with sibling engines that serve the same requests
        self._lengths: dict[str, int] = lengths if lengths is not None else {}

    # -- public accessors -------------------------------------------------

    def q_heads_by_worker(self) -> dict[int, tuple[int, ...]]:
        return {self.worker_ids[lw]: self.topo.head_owner[lw]
                for lw in range(self.pc.p)}

    def kv_heads_by_worker(self) -> dict[int, tuple[int, ...]]:
        return {self.worker_ids[lw]: self.topo.kv_needed[lw]
                for lw in range(self.pc.p)}

    def resident_weight_elements(self, lw: int = 0) -> int:
        return self.shards[lw].elements()

    def request_length(self, request: str) -> int:
        return self._lengths.get(request, 0)

    # -- stepping ----------------------------------------------------------

    def prefill(self, request: str, token_ids) -> tuple[int, np.ndarray]:
        """Run the whole prompt; returns (first output token, logits row)."""
        if request in self._lengths:
            raise ConfigError(f"request {request} already prefilled")
        ids = list(token_ids)
        if not ids:
            raise ConfigError("prompt must not be empty")
        rows = [BatchRow(request, tok, pos) for pos, tok in enumerate(ids)]
        logits = self.step(rows)[request]
        return argmax_token(logits), logits

    def decode_step(self, last_tokens: dict[str, int]) -> dict[str, tuple[int, np.ndarray]]:
        """One decode row per request; returns next token and logits each."""
        if not last_tokens:
            raise ConfigError("decode batch must not be empty")
        rows = []
        for request in sorted(last_tokens):
            if request not in self._lengths:
                raise ConfigError(f"request {request} was never prefilled")
            rows.append(BatchRow(request, last_tokens[request],
                                 self._lengths[request]))
        logits = self.step(rows)
        return {r: (argmax_token(l), l) for r, l in logits.items()}

    def step(self, rows: list[BatchRow]) -> dict[str, np.ndarray]:
        """Run one padded batch; returns the last-row logits per request."""
        plan = _plan_step(rows, self.pc.sp)
        fns = [
            (lambda lw=lw: self._worker_step(lw, plan))
            for lw in range(self.pc.p)
        ]
        results = run_spmd(fns, self.fabric)
        for other in results[1:]:
            for request, row in results[0].items():
                if not np.array_equal(row, other[request]):
                    raise NumericsError(
                        f"workers disagree on logits of request {request}"
                    )
        for request, idxs in plan.groups:
            self._lengths[request] = plan.rows[idxs[-1]].position + 1
        return results[0]

    # -- per-worker forward -------------------------------------------------

    def _comm(self, members_local) -> "GroupComm":
        members = tuple(self.worker_ids[m] for m in members_local)
        return self.fabric.group(members)

    def _mm(self, pid: int, layer, a: Matrix, b: Matrix) -> Matrix:
        self.ledger.add_compute(pid, layer, a.shape[0] * a.shape[1] * b.shape[1])
        return matmul(a, b)

    def _worker_step(self, lw: int, plan: _StepPlan) -> dict[str, np.ndarray]:
        mc, topo = self.mc, self.topo
        sp, tp = self.pc.sp, self.pc.tp
        pid = self.worker_ids[lw]
        shards = self.shards[lw]
        s = topo.sp_rank(lw)
        n = len(plan.rows)
        rows_w = n // sp
        my_rows = plan.rows[s * rows_w:(s + 1) * rows_w]

        w = self.weights
        x = _embed_rows(w, [r.token for r in my_rows],
                        [r.position for r in my_rows])

        for layer in range(mc.layers):
            x = self._layer(lw, pid, layer, x, plan, n, shards)

        # Gather only the rows sampling needs; every worker then scores the
        # same gathered rows, so logits agree bitwise across workers.
        samp_idx = sorted(i for _, i in plan.sampling)
        mine = [i - s * rows_w for i in samp_idx
                if s * rows_w <= i < (s + 1) * rows_w]
        x_samp = np.ascontiguousarray(x[mine, :]) if mine else \
            np.zeros((0, mc.hidden), dtype=np.float32)
        if sp > 1:
            parts = all_gather(self._comm(topo.sp_group_of(lw)), pid, x_samp,
                               ledger=self.ledger, tag="out_ag", layer=None)
            x_samp = np.ascontiguousarray(np.vstack(parts))
        logits = self._mm(pid, None, x_samp, w.lm)
        by_row = dict(zip(samp_idx, logits))
        return {request: by_row[i] for request, i in plan.sampling}

    def _layer(self, lw: int, pid: int, layer: int, x: Matrix,
               plan: _StepPlan, n: int, shards: _WorkerShards) -> Matrix:
        mc, topo = self.mc, self.topo
        sp, tp = self.pc.sp, self.pc.tp
        hd = mc.head_dim
        own_q = topo.head_owner[lw]
        needed = topo.kv_needed[lw]
        kv_slice = topo.tp_kv_slices[topo.tp_rank(lw)]

        qkv = self._mm(pid, layer, x, shards.qkv[layer])
        q_width = (mc.q_heads // tp) * hd
        q_local = np.ascontiguousarray(qkv[:, :q_width])
        k_local = np.ascontiguousarray(
            qkv[:, q_width:q_width + len(kv_slice) * hd])
        v_local = np.ascontiguousarray(qkv[:, q_width + len(kv_slice) * hd:])

        q_mine, kv = self._exchange(lw, pid, layer, q_local, k_local, v_local)

        # attention over owned heads; rows of each request see their cache
        # plus the causal prefix of this step's rows, pads see themselves
        scale = np.float32(1.0 / np.sqrt(hd))
        head_outs = []
        for pos_in_own, q_head in enumerate(own_q):
            g = mc.kv_head_for(q_head)
            q_i = np.ascontiguousarray(
                q_mine[:, pos_in_own * hd:(pos_in_own + 1) * hd])
            k_new, v_new = kv[g]
            out = np.zeros((n, hd), dtype=np.float32)
            for request, idxs in plan.groups:
                cache = self.cache_store.slice_for(pid, request, mc, needed)
                idx = list(idxs)
                k_req = np.ascontiguousarray(k_new[idx, :])
                v_req = np.ascontiguousarray(v_new[idx, :])
                cached_k = cache.k_matrix(layer, g)
                if cached_k.shape[0]:
                    k_ctx = np.ascontiguousarray(np.vstack([cached_k, k_req]))
                    v_ctx = np.ascontiguousarray(
                        np.vstack([cache.v_matrix(layer, g), v_req]))
                    cached = cached_k.shape[0]
                else:
                    k_ctx, v_ctx, cached = k_req, v_req, 0
                visible = [cached + j + 1 for j in range(len(idx))]
                q_rows = np.ascontiguousarray(q_i[idx, :])
                self.ledger.add_compute(
                    pid, layer, 2 * len(idx) * hd * k_ctx.shape[0])
                out[idx, :] = attend_head(q_rows, k_ctx, v_ctx, visible, scale)
            for r in plan.pad_rows:
                q_rows = np.ascontiguousarray(q_i[r:r + 1, :])
                self.ledger.add_compute(pid, layer, 2 * hd)
                out[r, :] = attend_head(
                    q_rows, k_new[r:r + 1, :], v_new[r:r + 1, :], [1], scale)
            head_outs.append(out)
        attn = concat_cols(head_outs)

        if sp > 1:
            chunks = [np.ascontiguousarray(attn[i * (n // sp):(i + 1) * (n // sp), :])
                      for i in range(sp)]
            got = all_to_all(self._comm(topo.sp_group_of(lw)), pid, chunks,
                             ledger=self.ledger, tag="attn_a2a", layer=layer)
            attn = concat_cols(got)

        proj = self._mm(pid, layer, attn, shards.o[layer])
        if tp > 1:
            proj = all_reduce(self._comm(topo.tp_group_of(lw)), pid, proj,
                              ledger=self.ledger, tag="o_ar", layer=layer)
        x = x + proj

        mlp = self._mm(pid, layer, silu(self._mm(pid, layer, x, shards.up[layer])),
                       shards.down[layer])
        if tp > 1:
            mlp = all_reduce(self._comm(topo.tp_group_of(lw)), pid, mlp,
                             ledger=self.ledger, tag="mlp_ar", layer=layer)
        x = x + mlp

        # persist this step's real rows on every holder of each needed head
        for g in needed:
            k_new, v_new = kv[g]
            for request, idxs in plan.groups:
                cache = self.cache_store.slice_for(pid, request, mc, needed)
                for i in idxs:
                    cache.append(layer, g, plan.rows[i].position,
                                 k_new[i], v_new[i])
        return x

    def _exchange(self, lw: int, pid: int, layer: int, q_local: Matrix,
                  k_local: Matrix, v_local: Matrix):
        """Trade row shards for head shards; returns (q_mine, kv dict)."""
        mc, topo = self.mc, self.topo
        sp = self.pc.sp
        needed = topo.kv_needed[lw]
        kv_slice = topo.tp_kv_slices[topo.tp_rank(lw)]
        hd = mc.head_dim

        if sp == 1:
            kv = _kv_dict(kv_slice, k_local, v_local, hd)
            return q_local, {g: kv[g] for g in needed}

        comm = self._comm(topo.sp_group_of(lw))
        q_pieces = split_cols(q_local, sp)
        if topo.sp_ag == 1:
            k_pieces = split_cols(k_local, sp)
            v_pieces = split_cols(v_local, sp)
            if self.fuse_qkv:
                payload = [(q_pieces[i], k_pieces[i], v_pieces[i])
                           for i in range(sp)]
                got = all_to_all(comm, pid, payload, ledger=self.ledger,
                                 tag="qkv_a2a", layer=layer)
                q_parts = [g[0] for g in got]
                k_parts = [g[1] for g in got]
                v_parts = [g[2] for g in got]
            else:
                q_parts = all_to_all(comm, pid, q_pieces, ledger=self.ledger,
                                     tag="q_a2a", layer=layer)
                got = all_to_all(
                    comm, pid,
                    [(k_pieces[i], v_pieces[i]) for i in range(sp)],
                    ledger=self.ledger, tag="kv_a2a", layer=layer)
                k_parts = [g[0] for g in got]
                v_parts = [g[1] for g in got]
            q_mine = np.ascontiguousarray(np.vstack(q_parts))
            k_mine = np.ascontiguousarray(np.vstack(k_parts))
            v_mine = np.ascontiguousarray(np.vstack(v_parts))
            kv = _kv_dict(needed, k_mine, v_mine, hd)
            return q_mine, kv

        q_parts = all_to_all(comm, pid, q_pieces, ledger=self.ledger,
                             tag="q_a2a", layer=layer)
        q_mine = np.ascontiguousarray(np.vstack(q_parts))
        k_full, v_full = _replicate_kv(
            self, lw, pid, layer, k_local, v_local)
        return q_mine, {needed[0]: (k_full, v_full)}


def _kv_dict(heads, k_mat: Matrix, v_mat: Matrix, hd: int):
    """Split column-stacked per-head K and V into a head-indexed dict."""
    out = {}
    for j, g in enumerate(heads):
        out[g] = (
            np.ascontiguousarray(k_mat[:, j * hd:(j + 1) * hd]),
            np.ascontiguousarray(v_mat[:, j * hd:(j + 1) * hd]),
        )
    return out


def _replicate_kv(engine: ParallelEngine, lw: int, pid: int, layer,
                  k_local: Matrix, v_local: Matrix) -> tuple[Matrix, Matrix]:
    """Two-stage exchange giving this worker all rows of its one KV head.

    Stage one trades heads within the all-to-all group (peers that hold the
    same row shard family but need different heads); stage two gathers the
    missing row shards within the all-gather group (peers that need the same
    head).  The gathered blocks arrive grouped by gather rank and must be
    re-interleaved into original row order.
    """
    topo = engine.topo
    sp_aa, sp_ag = topo.sp_aa, topo.sp_ag
    sp = engine.pc.sp
    rows_w = k_local.shape[0]

    if sp_aa > 1:
        k_pieces = split_cols(k_local, sp_aa)
        v_pieces = split_cols(v_local, sp_aa)
        got = all_to_all(
            engine._comm(topo.aa_group_of(lw)), pid,
            [(k_pieces[i], v_pieces[i]) for i in range(sp_aa)],
            ledger=engine.ledger, tag="kv_aa", layer=layer)
        k_stack = np.ascontiguousarray(np.vstack([g[0] for g in got]))
        v_stack = np.ascontiguousarray(np.vstack([g[1] for g in got]))
    else:
        k_stack, v_stack = k_local, v_local

    if sp_ag > 1:
        blocks = all_gather(
            engine._comm(topo.ag_group_of(lw)), pid, (k_stack, v_stack),
            ledger=engine.ledger, tag="kv_ag", layer=layer)
    else:
        blocks = [(k_stack, v_stack)]

    # block j holds row chunks {j + k * sp_ag}, stacked by k; chunk c of the
    # original order therefore lives in block c % sp_ag at offset c // sp_ag
    k_out = np.zeros((sp * rows_w, k_local.shape[1] // sp_aa), dtype=np.float32)
    v_out = np.zeros_like(k_out)
    for c in range(sp):
        j, k = c % sp_ag, c // sp_ag
        k_out[c * rows_w:(c + 1) * rows_w, :] = \
            blocks[j][0][k * rows_w:(k + 1) * rows_w, :]
        v_out[c * rows_w:(c + 1) * rows_w, :] = \
            blocks[j][1][k * rows_w:(k + 1) * rows_w, :]
    return k_out, v_out


def kv_replicate(mc: ModelConfig, sp: int, k_by_worker, v_by_worker, *,
                 ledger: CommLedger | None = None):
    """Run just the KV redistribution stage over sp single-tensor workers.

    `k_by_worker[s]` / `v_by_worker[s]` hold worker s's row shard of every KV
    head, column-stacked per head.  Returns, per worker, the full-sequence
    (K, V) of each KV head that worker's query block needs.  This drives the
    exact code path the full forward uses, exposed for direct verification.
    """
    pc = ParallelConfig(sp=sp, tp=1)
    weights = Weights.from_seed(mc, 0)
    ledger = ledger if ledger is not None else CommLedger()
    engine = ParallelEngine(mc, pc, weights, ledger=ledger)
    topo = engine.topo

    def worker(lw: int):
        pid = engine.worker_ids[lw]
        if topo.sp_ag == 1:
            if sp == 1:
                k_mine, v_mine = k_by_worker[lw], v_by_worker[lw]
            else:
                comm = engine._comm(topo.sp_group_of(lw))
                k_pieces = split_cols(k_by_worker[lw], sp)
                v_pieces = split_cols(v_by_worker[lw], sp)
                got = all_to_all(
                    comm, pid, [(k_pieces[i], v_pieces[i]) for i in range(sp)],
                    ledger=ledger, tag="kv_a2a", layer=0)
                k_mine = np.ascontiguousarray(np.vstack([g[0] for g in got]))
                v_mine = np.ascontiguousarray(np.vstack([g[1] for g in got]))
            return _kv_dict(topo.kv_needed[lw], k_mine, v_mine, mc.head_dim)
        k_full, v_full = _replicate_kv(
            engine, lw, pid, 0, k_by_worker[lw], v_by_worker[lw])
        return {topo.kv_needed[lw][0]: (k_full, v_full)}

    return run_spmd([lambda lw=lw: worker(lw) for lw in range(sp)],
                    engine.fabric)
