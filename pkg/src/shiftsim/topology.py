"""Worker grouping and attention-head placement for (SP, TP) deployments.

A deployment of p = sp * tp workers is arranged as a grid.  Worker
w = s * tp + t has sequence rank s and tensor rank t:

  * TP groups are consecutive blocks of size tp (all-reduce peers).
  * SP groups stride across those blocks (all-to-all peers).
  * sp_tp_order lists all workers SP-major; it is the group order used when
    the same workers are re-formed into one tensor-parallel group of size p,
    and is what keeps per-worker head ownership identical across the two
    arrangements.

Query heads are owned uniquely: worker (s, t) owns the s-th sub-block of
tensor block t, q_heads / p heads in total.  KV heads follow from the grouped
query mapping (contiguous query blocks share a KV head).  When a worker's
tensor slice holds fewer KV heads than its sequence group needs, the slice is
replicated through a two-stage exchange; aa_groups and ag_groups describe the
all-to-all and all-gather stages of that exchange.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, UnsupportedConfigError


@dataclass(frozen=True)
class ParallelConfig:
    """Degrees of a deployment: sp * tp workers, with a shift threshold.

    shift_threshold is the batch row count at or below which a shift-capable
    engine runs the full tensor-parallel arrangement; it defaults to one row
    per worker, the smallest batch the sequence dimension can split without
    idling workers.
    """

    sp: int
    tp: int
    p: int = 0
    shift_threshold: int = 0

    def __post_init__(self):
        if self.sp < 1 or self.tp < 1:
            raise ConfigError(f"degrees must be >= 1, got sp={self.sp} tp={self.tp}")
        if self.p == 0:
            object.__setattr__(self, "p", self.sp * self.tp)
        if self.p != self.sp * self.tp:
            raise ConfigError(f"p={self.p} != sp*tp={self.sp * self.tp}")
        if self.shift_threshold == 0:
            object.__setattr__(self, "shift_threshold", self.p)
        if self.shift_threshold < 1:
            raise ConfigError("shift_threshold must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the toy transformer; hidden == q_heads * head_dim."""

    layers: int
    hidden: int
    mlp_hidden: int
    q_heads: int
    kv_heads: int
    head_dim: int
    vocab: int
    max_ctx: int = 256

    def __post_init__(self):
        for name in ("layers", "hidden", "mlp_hidden", "q_heads",
                     "kv_heads", "head_dim", "vocab", "max_ctx"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.q_heads % self.kv_heads != 0:
            raise ConfigError(
                f"q_heads={self.q_heads} not divisible by kv_heads={self.kv_heads}"
            )
        if self.hidden != self.q_heads * self.head_dim:
            raise ConfigError(
                f"hidden={self.hidden} != q_heads*head_dim="
                f"{self.q_heads * self.head_dim}"
            )

    @property
    def group_size(self) -> int:
        """Query heads per KV head."""
        return self.q_heads // self.kv_heads

    def kv_head_for(self, q_head: int) -> int:
        """Grouped mapping: contiguous query blocks share one KV head."""
        return q_head // self.group_size


def _owned_q_heads(q_heads: int, sp: int, tp: int, worker: int) -> tuple[int, ...]:
    per_worker = q_heads // (sp * tp)
    s, t = worker // tp, worker % tp
    start = t * (q_heads // tp) + s * per_worker
    return tuple(range(start, start + per_worker))


def head_permutation(q_heads: int, sp: int, tp: int) -> tuple[int, ...]:
    """Slot of each query head under the (sp, tp) arrangement.

    Entry i is the position head i occupies when per-worker head blocks are
    laid out in natural worker order.  Pure tensor or pure sequence
    arrangements yield the identity.
    """
    p = sp * tp
    if q_heads % p != 0:
        raise UnsupportedConfigError(
            f"q_heads={q_heads} not divisible by sp*tp={p}"
        )
    layout: list[int] = []
    for w in range(p):
        layout.extend(_owned_q_heads(q_heads, sp, tp, w))
    perm = [0] * q_heads
    for slot, head in enumerate(layout):
        perm[head] = slot
    return tuple(perm)


def _kv_factor(sp: int, kv_local: int) -> tuple[int, int]:
    """Split sp into (sp_aa, sp_ag) stages for kv_local locally held KV heads.

    sp_aa peers exchange distinct heads all-to-all; sp_ag peers then gather
    row shards of the head they share.  sp_ag == 1 means no replication.
    """
    if sp <= kv_local:
        if kv_local % sp != 0:
            raise UnsupportedConfigError(
                f"kv heads per slice ({kv_local}) not divisible by sp={sp}"
            )
        return sp, 1
    if sp % kv_local != 0:
        raise UnsupportedConfigError(
            f"sp={sp} not divisible by kv heads per slice ({kv_local})"
        )
    return kv_local, sp // kv_local


def kv_groups(mc: ModelConfig, sp: int) -> tuple[list[list[int]], list[list[int]]]:
    """(aa_groups, ag_groups) over sequence ranks 0..sp-1 for a tp=1 slice.

    With sp workers holding mc.kv_heads projected KV heads each for their own
    row shard, aa_groups exchange so that each worker holds one head's rows
    from its aa peers, and ag_groups gather the remaining row shards of that
    head.  For sp <= kv_heads the gather stage is trivial (singleton groups)
    and the exchange reduces to the plain all-to-all path.
    """
    sp_aa, sp_ag = _kv_factor(sp, mc.kv_heads)
    aa = [[m + k * sp_ag for k in range(sp_aa)] for m in range(sp_ag)]
    ag = [[g * sp_ag + j for j in range(sp_ag)] for g in range(sp_aa)]
    return aa, ag


def _tp_kv_slice(mc: ModelConfig, tp: int, t: int) -> tuple[int, ...]:
    """KV heads whose projections tensor rank t computes.

    If kv_heads < tp the kv projection columns are replicated so each rank
    computes the single KV head its query block reads.
    """
    if mc.kv_heads % tp == 0:
        per = mc.kv_heads // tp
        return tuple(range(t * per, (t + 1) * per))
    if tp % mc.kv_heads == 0:
        return (t * mc.kv_heads // tp,)
    raise UnsupportedConfigError(
        f"kv_heads={mc.kv_heads} incompatible with tp={tp}: "
        "need one to divide the other"
    )


@dataclass(frozen=True)
class Topology:
    """Groups, ownership maps, and exchange factors for one deployment."""

    mc: ModelConfig
    pc: ParallelConfig
    tp_groups: tuple[tuple[int, ...], ...]
    sp_groups: tuple[tuple[int, ...], ...]
    sp_tp_order: tuple[int, ...]
    head_owner: dict[int, tuple[int, ...]] = field(repr=False)
    kv_needed: dict[int, tuple[int, ...]] = field(repr=False)
    kv_holders: dict[int, tuple[int, ...]] = field(repr=False)
    tp_kv_slices: tuple[tuple[int, ...], ...] = field(repr=False)
    sp_aa: int = 1
    sp_ag: int = 1
    aa_groups: tuple[tuple[int, ...], ...] = ()
    ag_groups: tuple[tuple[int, ...], ...] = ()

    def sp_rank(self, worker: int) -> int:
        return worker // self.pc.tp

    def tp_rank(self, worker: int) -> int:
        return worker % self.pc.tp

    def worker(self, s: int, t: int) -> int:
        return s * self.pc.tp + t

    def sp_group_of(self, worker: int) -> tuple[int, ...]:
        return self.sp_groups[self.tp_rank(worker)]

    def tp_group_of(self, worker: int) -> tuple[int, ...]:
        return self.tp_groups[self.sp_rank(worker)]

    def aa_group_of(self, worker: int) -> tuple[int, ...]:
        for g in self.aa_groups:
            if worker in g:
                return g
        raise ConfigError(f"worker {worker} missing from aa_groups")

    def ag_group_of(self, worker: int) -> tuple[int, ...]:
        for g in self.ag_groups:
            if worker in g:
                return g
        raise ConfigError(f"worker {worker} missing from ag_groups")

    def to_text(self) -> str:
        lines = [
            f"parallel sp={self.pc.sp} tp={self.pc.tp} p={self.pc.p}",
            f"model q_heads={self.mc.q_heads} kv_heads={self.mc.kv_heads} "
            f"head_dim={self.mc.head_dim}",
            f"tp_groups {[list(g) for g in self.tp_groups]}",
            f"sp_groups {[list(g) for g in self.sp_groups]}",
            f"sp_tp_order {[list(self.sp_tp_order)]}",
            f"head_permutation {head_permutation(self.mc.q_heads, self.pc.sp, self.pc.tp)}",
            f"kv_exchange sp_aa={self.sp_aa} sp_ag={self.sp_ag}",
            f"aa_groups {[list(g) for g in self.aa_groups]}",
            f"ag_groups {[list(g) for g in self.ag_groups]}",
        ]
        for w in range(self.pc.p):
            lines.append(
                f"worker {w} q_heads={list(self.head_owner[w])} "
                f"kv_heads={list(self.kv_needed[w])}"
            )
        for h in sorted(self.kv_holders):
            lines.append(f"kv_head {h} holders={list(self.kv_holders[h])}")
        return "\n".join(lines) + "\n"


def build_topology(mc: ModelConfig, pc: ParallelConfig) -> Topology:
    sp, tp, p = pc.sp, pc.tp, pc.p
    if mc.q_heads % p != 0:
        raise UnsupportedConfigError(
            f"q_heads={mc.q_heads} not divisible by p={p}"
        )

    tp_groups = tuple(tuple(range(s * tp, (s + 1) * tp)) for s in range(sp))
    sp_groups = tuple(tuple(t + s * tp for s in range(sp)) for t in range(tp))
    sp_tp_order = tuple(w for g in sp_groups for w in g)

    head_owner = {w: _owned_q_heads(mc.q_heads, sp, tp, w) for w in range(p)}
    kv_needed = {
        w: tuple(sorted({mc.kv_head_for(q) for q in head_owner[w]}))
        for w in range(p)
    }
    tp_kv_slices = tuple(_tp_kv_slice(mc, tp, t) for t in range(tp))

    # Workers in one sequence group share tensor rank t; factor the exchange
    # of that rank's KV slice across the group.
    sp_aa, sp_ag = _kv_factor(sp, len(tp_kv_slices[0]))
    rank_aa, rank_ag = kv_groups_from_factor(sp_aa, sp_ag)
    aa_groups = tuple(
        tuple(group[r] for r in ranks)
        for group in sp_groups for ranks in rank_aa
    )
    ag_groups = tuple(
        tuple(group[r] for r in ranks)
        for group in sp_groups for ranks in rank_ag
    )

    kv_holders: dict[int, list[int]] = {}
    for w in range(p):
        for h in kv_needed[w]:
            kv_holders.setdefault(h, []).append(w)
    holders = {h: tuple(sorted(ws)) for h, ws in kv_holders.items()}

    topo = Topology(
        mc=mc, pc=pc,
        tp_groups=tp_groups, sp_groups=sp_groups, sp_tp_order=sp_tp_order,
        head_owner=head_owner, kv_needed=kv_needed, kv_holders=holders,
        tp_kv_slices=tp_kv_slices,
        sp_aa=sp_aa, sp_ag=sp_ag,
        aa_groups=aa_groups, ag_groups=ag_groups,
    )
    _check_partition(topo)
    return topo


def kv_groups_from_factor(sp_aa: int, sp_ag: int) -> tuple[list[list[int]], list[list[int]]]:
    """Stage groups over sequence ranks for given exchange factors."""
    aa = [[m + k * sp_ag for k in range(sp_aa)] for m in range(sp_ag)]
    ag = [[g * sp_ag + j for j in range(sp_ag)] for g in range(sp_aa)]
    return aa, ag


def _check_partition(topo: Topology) -> None:
    p = topo.pc.p
    seen: list[int] = []
    for g in topo.head_owner.values():
        seen.extend(g)
    if sorted(seen) != list(range(topo.mc.q_heads)):
        raise ConfigError("query heads are not partitioned exactly once")
    if sorted(topo.sp_tp_order) != list(range(p)):
        raise ConfigError("sp_tp_order is not a permutation of workers")
    for w in range(p):
        if topo.kv_needed[w] != tuple(
            sorted({topo.mc.kv_head_for(q) for q in topo.head_owner[w]})
        ):
            raise ConfigError(f"kv_needed inconsistent for worker {w}")
