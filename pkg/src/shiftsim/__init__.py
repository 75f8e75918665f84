"""Numerically faithful simulation of dynamic (SP, TP) transformer serving."""

from .errors import (
    CapacityError, ConfigError, NumericsError, ProtocolError, ShiftSimError,
    UnsupportedConfigError, VerificationError,
)
from .model import Sequence, ShardedKVCache, Weights, generate
from .parallel import BatchRow, CacheStore, ParallelEngine, pad_batch
from .shift import ShiftEngine, check_kv_invariance, load_shift_engine
from .sim import (
    CostModel, Request, SchedulerConfig, TraceParams, generate_trace,
    simulate, summarize,
)
from .topology import (
    ModelConfig, ParallelConfig, Topology, build_topology, head_permutation,
)

__all__ = [
    "BatchRow",
    "CacheStore",
    "CapacityError",
    "ConfigError",
    "CostModel",
    "ModelConfig",
    "NumericsError",
    "ParallelConfig",
    "ParallelEngine",
    "ProtocolError",
    "Request",
    "SchedulerConfig",
    "Sequence",
    "ShardedKVCache",
    "ShiftEngine",
    "ShiftSimError",
    "Topology",
    "TraceParams",
    "UnsupportedConfigError",
    "VerificationError",
    "Weights",
    "build_topology",
    "check_kv_invariance",
    "generate",
    "generate_trace",
    "head_permutation",
    "load_shift_engine",
    "pad_batch",
    "simulate",
    "summarize",
]
