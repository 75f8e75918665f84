"""Rendezvous-synchronous collectives over simulated worker groups.

Workers run as plain threads.  A collective call blocks until every member of
the group has arrived, then every member computes its own result from the
deposited payloads in a fixed group-rank order, so results are bit-identical
regardless of thread scheduling.  A member that never shows up breaks the
rendezvous after a timeout and every waiter raises ProtocolError.

Traffic accounting follows the usual cost conventions:

  * all_to_all:  a member transmits every shard except the one it keeps.
  * all_gather:  a member transmits its shard to each of the g-1 peers.
  * all_reduce:  ring schedule, 2 * (g-1) / g of the tensor per member.

The CommLedger records per (collective, tag, layer, worker) call and element
counts; counters only ever increase.  Compute element counts are tracked on
the side so callers can form communication-to-compute ratios.
"""

from __future__ import annotations

import threading
from collections import defaultdict

import numpy as np

from .errors import ConfigError, ProtocolError

DEFAULT_TIMEOUT = 60.0


class CommLedger:
    """Monotone per-worker traffic and compute counters."""

    def __init__(self):
        self._lock = threading.Lock()
        # (collective, tag, layer, worker) -> [calls, elements sent]
        self._comm: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])
        # (layer, worker) -> multiply-accumulate element count
        self._compute: dict[tuple, int] = defaultdict(int)

    def record(self, collective: str, tag: str, layer, worker: int, sent: int) -> None:
        if sent < 0:
            raise ConfigError("sent element count must be >= 0")
        with self._lock:
            cell = self._comm[(collective, tag, layer, worker)]
            cell[0] += 1
            cell[1] += sent

    def add_compute(self, worker: int, layer, elements: int) -> None:
        with self._lock:
            self._compute[(layer, worker)] += elements

    def _select(self, collective, tag, layer, worker):
        for (c, t, l, w), (calls, sent) in self._comm.items():
            if collective is not None and c != collective:
                continue
            if tag is not None and t != tag:
                continue
            if layer is not None and l != layer:
                continue
            if worker is not None and w != worker:
                continue
            yield (c, t, l, w), calls, sent

    def calls(self, collective=None, tag=None, layer=None, worker=None) -> int:
        with self._lock:
            return sum(c for _, c, _ in self._select(collective, tag, layer, worker))

    def sent(self, collective=None, tag=None, layer=None, worker=None) -> int:
        with self._lock:
            return sum(s for _, _, s in self._select(collective, tag, layer, worker))

    def compute(self, worker=None, layer=None) -> int:
        with self._lock:
            return sum(
                v for (l, w), v in self._compute.items()
                if (worker is None or w == worker) and (layer is None or l == layer)
            )

    def workers(self) -> list[int]:
        with self._lock:
            return sorted({w for (_, _, _, w) in self._comm})

    def check_lockstep(self, workers) -> None:
        """Every worker must have made the same calls the same number of times."""
        per_worker: dict[int, dict[tuple, int]] = {w: {} for w in workers}
        with self._lock:
            for (c, t, l, w), (calls, _) in self._comm.items():
                if w in per_worker:
                    per_worker[w][(c, t, l)] = calls
        baseline = per_worker[next(iter(per_worker))]
        for w, counts in per_worker.items():
            if counts != baseline:
                raise ProtocolError(
                    f"lockstep violated: worker {w} call counts {counts} "
                    f"differ from {baseline}"
                )

    def snapshot(self) -> dict[tuple, tuple[int, int]]:
        with self._lock:
            return {k: (v[0], v[1]) for k, v in self._comm.items()}

    def volumes_since(self, snap: dict[tuple, tuple[int, int]]) -> dict[str, int]:
        """Total elements sent per tag since `snap`, summed over workers."""
        out: dict[str, int] = defaultdict(int)
        with self._lock:
            for (c, t, l, w), (calls, sent) in self._comm.items():
                prev = snap.get((c, t, l, w), (0, 0))[1]
                if sent > prev:
                    out[t] += sent - prev
        return dict(out)

    def dump(self) -> str:
        lines = ["collective tag layer worker calls sent"]
        with self._lock:
            keys = sorted(
                self._comm,
                key=lambda k: (k[0], k[1], (k[2] is None, k[2]), k[3]),
            )
            for k in keys:
                calls, sent = self._comm[k]
                layer = "-" if k[2] is None else k[2]
                lines.append(f"{k[0]} {k[1]} {layer} {k[3]} {calls} {sent}")
        return "\n".join(lines) + "\n"


class GroupComm:
    """Reusable rendezvous point for one fixed group of workers."""

    def __init__(self, members, timeout: float = DEFAULT_TIMEOUT):
        self.members = tuple(members)
        if len(set(self.members)) != len(self.members):
            raise ConfigError(f"duplicate members in group {self.members}")
        self._pos = {w: i for i, w in enumerate(self.members)}
        self._slots: list = [None] * len(self.members)
        self._barrier = (
            threading.Barrier(len(self.members), timeout=timeout)
            if len(self.members) > 1 else None
        )

    @property
    def size(self) -> int:
        return len(self.members)

    def pos(self, worker: int) -> int:
        try:
            return self._pos[worker]
        except KeyError:
            raise ConfigError(f"worker {worker} is not in group {self.members}")

    def exchange(self, worker: int, payload):
        """Deposit `payload`, wait for the group, return all deposits by rank."""
        i = self.pos(worker)
        if self._barrier is None:
            return [payload]
        self._slots[i] = payload
        self._wait()
        out = list(self._slots)
        # Second phase: nobody may start the next exchange before everyone
        # has taken their snapshot of the slots.
        self._wait()
        return out

    def _wait(self):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise ProtocolError(
                f"collective rendezvous broken in group {self.members} "
                "(peer missing, timed out, or aborted)"
            ) from None

    def abort(self):
        if self._barrier is not None:
            self._barrier.abort()


class CommFabric:
    """All rendezvous groups of one deployment, abortable as a unit."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._groups: dict[tuple, GroupComm] = {}
        self._lock = threading.Lock()
        self._aborted = False

    def group(self, members) -> GroupComm:
        key = tuple(members)
        with self._lock:
            if key not in self._groups:
                comm = GroupComm(key, timeout=self.timeout)
                if self._aborted:
                    comm.abort()
                self._groups[key] = comm
            return self._groups[key]

    def abort_all(self):
        # Groups created after this point come up pre-aborted, so a worker
        # that had not reached its first rendezvous yet still unblocks.
        with self._lock:
            self._aborted = True
            groups = list(self._groups.values())
        for g in groups:
            g.abort()


def _payload_elements(payload) -> int:
    """Tensor elements in a payload; non-tensor payloads are free."""
    if isinstance(payload, np.ndarray):
        return int(payload.size)
    if isinstance(payload, (list, tuple)):
        return sum(_payload_elements(p) for p in payload)
    return 0


def all_to_all(comm: GroupComm, worker: int, shards, *,
               ledger: CommLedger | None = None, tag: str = "a2a", layer=None):
    """Shard i of every member goes to member at group rank i.

    Returns the shards addressed to `worker`, ordered by sender group rank.
    The ledger is charged for every transmitted shard, i.e. all but the one
    the worker keeps for itself.
    """
    if len(shards) != comm.size:
        raise ConfigError(
            f"all_to_all needs {comm.size} shards, got {len(shards)}"
        )
    me = comm.pos(worker)
    sent = sum(_payload_elements(s) for i, s in enumerate(shards) if i != me)
    deposits = comm.exchange(worker, list(shards))
    if ledger is not None:
        ledger.record("all_to_all", tag, layer, worker, sent)
    return [deposits[j][me] for j in range(comm.size)]


def all_gather(comm: GroupComm, worker: int, shard, *,
               ledger: CommLedger | None = None, tag: str = "ag", layer=None):
    """Every member receives every shard, ordered by sender group rank."""
    out = comm.exchange(worker, shard)
    if ledger is not None:
        sent = _payload_elements(shard) * (comm.size - 1)
        ledger.record("all_gather", tag, layer, worker, sent)
    return out


def all_reduce(comm: GroupComm, worker: int, tensor: np.ndarray, *,
               ledger: CommLedger | None = None, tag: str = "ar", layer=None):
    """Elementwise sum over members, accumulated in group-rank order.

    Every member folds the deposited tensors left to right itself, so all
    members compute bit-identical sums.
    """
    deposits = comm.exchange(worker, tensor)
    for d in deposits:
        if d.shape != tensor.shape:
            raise ConfigError(
                f"all_reduce shape mismatch: {d.shape} vs {tensor.shape}"
            )
    out = deposits[0].copy()
    for d in deposits[1:]:
        out += d
    if ledger is not None:
        g = comm.size
        size = int(tensor.size)
        # Ring schedule: 2 * (g-1) chunks of size/g. Chunks are padded when
        # the tensor does not divide evenly.
        chunk = size // g if size % g == 0 else (size + g - 1) // g
        ledger.record("all_reduce", tag, layer, worker, 2 * (g - 1) * chunk)
    return out


def run_spmd(worker_fns, fabric: CommFabric | None = None):
    """Run one callable per worker on threads and collect their returns.

    If any worker raises, all rendezvous groups in `fabric` are aborted so
    the remaining workers unblock, and the primary error is re-raised (a
    non-protocol error wins over the secondary broken-rendezvous ones).
    """
    results = [None] * len(worker_fns)
    errors: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    def runner(i, fn):
        try:
            results[i] = fn()
        except BaseException as exc:
            with lock:
                errors.append((i, exc))
            if fabric is not None:
                fabric.abort_all()

    threads = [
        threading.Thread(target=runner, args=(i, fn), name=f"worker-{i}")
        for i, fn in enumerate(worker_fns)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = sorted(
            errors, key=lambda e: (isinstance(e[1], ProtocolError), e[0])
        )[0]
        raise primary[1]
    return results
