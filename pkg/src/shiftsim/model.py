"""Reference transformer with grouped query attention and a sharded KV cache.

The model is deliberately small and bare: learned token plus position
embeddings, per-layer fused QKV projection, grouped query attention
(contiguous query-head blocks share one KV head), an output projection, a
two-matrix MLP with a sigmoid-weighted linear activation, residual
connections around both blocks, no normalisation, greedy decoding only.

All math goes through the deterministic kernels in tensor_ops, and the
attention inner loop (attend_head) is shared with the parallel executor so a
degenerate single-worker deployment reproduces this module bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError
from .tensor_ops import (
    Matrix, concat_cols, derive_seed, init_weights, matmul, softmax_rows,
)
from .topology import ModelConfig

ACTIVATION = "silu"
_NEG_MASK = np.float32(-1e30)


@dataclass(frozen=True)
class Sequence:
    """A prompt: token ids in [0, vocab)."""

    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(t) for t in self.ids))
        if len(self.ids) == 0:
            raise ConfigError("a sequence needs at least one token")

    @property
    def n(self) -> int:
        return len(self.ids)


def silu(m: Matrix) -> Matrix:
    """x * sigmoid(x), the pinned MLP activation."""
    return m * (np.float32(1.0) / (np.float32(1.0) + np.exp(-m)))


def argmax_token(row: np.ndarray) -> int:
    """Greedy pick; ties resolve to the lowest token id."""
    return int(np.argmax(row))


@dataclass
class Weights:
    """Full unsharded parameters, reproducible from (mc, seed)."""

    mc: ModelConfig
    seed: int
    embed: Matrix
    pos: Matrix
    lm: Matrix
    qkv: list[Matrix]
    o: list[Matrix]
    up: list[Matrix]
    down: list[Matrix]

    @classmethod
    def from_seed(cls, mc: ModelConfig, seed: int) -> "Weights":
        d, hd = mc.hidden, mc.head_dim
        qkv_cols = (mc.q_heads + 2 * mc.kv_heads) * hd

        def mk(label: str, shape: tuple[int, int]) -> Matrix:
            return init_weights(derive_seed(seed, label), shape)

        return cls(
            mc=mc, seed=seed,
            embed=mk("embed", (mc.vocab, d)),
            pos=mk("pos", (mc.max_ctx, d)),
            lm=mk("lm", (d, mc.vocab)),
            qkv=[mk(f"layer{l}.qkv", (d, qkv_cols)) for l in range(mc.layers)],
            o=[mk(f"layer{l}.o", (mc.q_heads * hd, d)) for l in range(mc.layers)],
            up=[mk(f"layer{l}.up", (d, mc.mlp_hidden)) for l in range(mc.layers)],
            down=[mk(f"layer{l}.down", (mc.mlp_hidden, d)) for l in range(mc.layers)],
        )

    def named_tensors(self) -> list[tuple[str, Matrix]]:
        out = [("embed", self.embed), ("pos", self.pos), ("lm", self.lm)]
        for l in range(self.mc.layers):
            out += [
                (f"layer{l}.qkv", self.qkv[l]), (f"layer{l}.o", self.o[l]),
                (f"layer{l}.up", self.up[l]), (f"layer{l}.down", self.down[l]),
            ]
        return out

    def layer_elements(self) -> int:
        """Total per-layer weight elements, summed over layers."""
        return sum(
            m.size for name, m in self.named_tensors()
            if name.startswith("layer")
        )

    def save(self, base_path: str) -> None:
        """Write `base_path`.bin (little-endian float32) and `base_path`.json."""
        tensors = self.named_tensors()
        manifest = {
            "format": "shiftsim-weights-v1",
            "seed": self.seed,
            "activation": ACTIVATION,
            "model": {
                "layers": self.mc.layers, "hidden": self.mc.hidden,
                "mlp_hidden": self.mc.mlp_hidden, "q_heads": self.mc.q_heads,
                "kv_heads": self.mc.kv_heads, "head_dim": self.mc.head_dim,
                "vocab": self.mc.vocab, "max_ctx": self.mc.max_ctx,
            },
            "tensors": [],
        }
        offset = 0
        blob = bytearray()
        for name, m in tensors:
            data = np.ascontiguousarray(m, dtype="<f4").tobytes()
            manifest["tensors"].append(
                {"name": name, "rows": m.shape[0], "cols": m.shape[1],
                 "offset": offset}
            )
            blob.extend(data)
            offset += m.size
        with open(base_path + ".bin", "wb") as f:
            f.write(bytes(blob))
        with open(base_path + ".json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, base_path: str) -> "Weights":
        with open(base_path + ".json") as f:
            manifest = json.load(f)
        if manifest.get("format") != "shiftsim-weights-v1":
            raise ConfigError(f"unrecognised weight manifest at {base_path}.json")
        if manifest.get("activation") != ACTIVATION:
            raise ConfigError("manifest pins a different activation")
        mc = ModelConfig(**manifest["model"])
        raw = np.fromfile(base_path + ".bin", dtype="<f4")
        tensors: dict[str, Matrix] = {}
        for spec in manifest["tensors"]:
            size = spec["rows"] * spec["cols"]
            chunk = raw[spec["offset"]:spec["offset"] + size]
            if chunk.size != size:
                raise ConfigError(f"weight blob truncated at {spec['name']}")
            tensors[spec["name"]] = np.ascontiguousarray(
                chunk.reshape(spec["rows"], spec["cols"]).astype(np.float32)
            )
        return cls(
            mc=mc, seed=manifest["seed"],
            embed=tensors["embed"], pos=tensors["pos"], lm=tensors["lm"],
            qkv=[tensors[f"layer{l}.qkv"] for l in range(mc.layers)],
            o=[tensors[f"layer{l}.o"] for l in range(mc.layers)],
            up=[tensors[f"layer{l}.up"] for l in range(mc.layers)],
            down=[tensors[f"layer{l}.down"] for l in range(mc.layers)],
        )


class ShardedKVCache:
    """Per-layer, per-KV-head rows of (position, key, value).

    A cache instance holds a subset of heads (a worker's slice, or all heads
    for the reference path).  Positions are strictly increasing per head and
    identical across every (layer, head) the instance holds.
    """

    def __init__(self, mc: ModelConfig, heads=None):
        self.mc = mc
        self.heads = tuple(sorted(heads)) if heads is not None else tuple(
            range(mc.kv_heads)
        )
        for h in self.heads:
            if not 0 <= h < mc.kv_heads:
                raise ConfigError(f"kv head {h} out of range")
        self._pos: dict[tuple[int, int], list[int]] = {
            (l, h): [] for l in range(mc.layers) for h in self.heads
        }
        self._k: dict[tuple[int, int], list[np.ndarray]] = {
            k: [] for k in self._pos
        }
        self._v: dict[tuple[int, int], list[np.ndarray]] = {
            k: [] for k in self._pos
        }

    def _key(self, layer: int, head: int) -> tuple[int, int]:
        key = (layer, head)
        if key not in self._pos:
            raise ConfigError(
                f"cache slice holds heads {self.heads}, not head {head}"
            )
        return key

    def append(self, layer: int, head: int, position: int,
               k_row: np.ndarray, v_row: np.ndarray) -> None:
        key = self._key(layer, head)
        pos = self._pos[key]
        if pos and position <= pos[-1]:
            raise ConfigError(
                f"positions must increase: {position} after {pos[-1]}"
            )
        if position >= self.mc.max_ctx:
            raise CapacityError(
                f"position {position} exceeds max_ctx={self.mc.max_ctx}"
            )
        pos.append(position)
        self._k[key].append(np.asarray(k_row, dtype=np.float32).reshape(-1))
        self._v[key].append(np.asarray(v_row, dtype=np.float32).reshape(-1))

    def positions(self, layer: int, head: int) -> tuple[int, ...]:
        return tuple(self._pos[self._key(layer, head)])

    def k_matrix(self, layer: int, head: int) -> Matrix:
        rows = self._k[self._key(layer, head)]
        if not rows:
            return np.zeros((0, self.mc.head_dim), dtype=np.float32)
        return np.ascontiguousarray(np.stack(rows))

    def v_matrix(self, layer: int, head: int) -> Matrix:
        rows = self._v[self._key(layer, head)]
        if not rows:
            return np.zeros((0, self.mc.head_dim), dtype=np.float32)
        return np.ascontiguousarray(np.stack(rows))

    def seq_len(self) -> int:
        self.validate()
        first = next(iter(self._pos.values()), [])
        return len(first)

    def validate(self) -> None:
        baseline: list[int] | None = None
        for key, pos in self._pos.items():
            if any(a >= b for a, b in zip(pos, pos[1:])):
                raise ConfigError(f"positions not increasing at {key}")
            if baseline is None:
                baseline = pos
            elif pos != baseline:
                raise ConfigError(
                    f"position sets differ across heads: {key} has {pos}, "
                    f"expected {baseline}"
                )


def attend_head(q: Matrix, k_ctx: Matrix, v_ctx: Matrix,
                visible: list[int], scale: np.float32) -> Matrix:
    """Scaled dot-product attention for one head.

    `visible[r]` is how many leading context rows query row r may attend;
    later rows get an additive -1e30 before the softmax, which underflows to
    an exact zero weight.
    """
    scores = matmul(q, np.ascontiguousarray(k_ctx.T)) * scale
    mask = np.zeros_like(scores)
    for r, vis in enumerate(visible):
        mask[r, vis:] = _NEG_MASK
    probs = softmax_rows(scores + mask)
    return matmul(probs, v_ctx)


def _context(cache: ShardedKVCache, layer: int, head: int,
             new_k: Matrix, new_v: Matrix) -> tuple[Matrix, Matrix, int]:
    cached_k = cache.k_matrix(layer, head)
    if cached_k.shape[0] == 0:
        return new_k, new_v, 0
    cached_v = cache.v_matrix(layer, head)
    k = np.ascontiguousarray(np.vstack([cached_k, new_k]))
    v = np.ascontiguousarray(np.vstack([cached_v, new_v]))
    return k, v, cached_k.shape[0]


def _embed_rows(w: Weights, tokens: list[int], positions: list[int]) -> Matrix:
    mc = w.mc
    for t in tokens:
        if not 0 <= t < mc.vocab:
            raise ConfigError(f"token {t} outside vocab of {mc.vocab}")
    for p in positions:
        if p >= mc.max_ctx:
            raise CapacityError(f"position {p} exceeds max_ctx={mc.max_ctx}")
    return np.ascontiguousarray(w.embed[tokens, :] + w.pos[positions, :])


def _forward_rows(w: Weights, x: Matrix, positions: list[int],
                  cache: ShardedKVCache) -> Matrix:
    """Run all layers over new rows at `positions`, appending to the cache.

    Rows must belong to one request, in position order, directly extending
    the cached context.
    """
    mc = w.mc
    hd = mc.head_dim
    scale = np.float32(1.0 / np.sqrt(hd))
    n = x.shape[0]
    for layer in range(mc.layers):
        qkv = matmul(x, w.qkv[layer])
        heads_out = []
        kv_new: dict[int, tuple[Matrix, Matrix]] = {}
        for g in range(mc.kv_heads):
            k_cols = (mc.q_heads + g) * hd
            v_cols = (mc.q_heads + mc.kv_heads + g) * hd
            kv_new[g] = (
                np.ascontiguousarray(qkv[:, k_cols:k_cols + hd]),
                np.ascontiguousarray(qkv[:, v_cols:v_cols + hd]),
            )
        for i in range(mc.q_heads):
            g = mc.kv_head_for(i)
            q = np.ascontiguousarray(qkv[:, i * hd:(i + 1) * hd])
            k_ctx, v_ctx, cached = _context(cache, layer, g, *kv_new[g])
            visible = [cached + r + 1 for r in range(n)]
            heads_out.append(attend_head(q, k_ctx, v_ctx, visible, scale))
        attn = matmul(concat_cols(heads_out), w.o[layer])
        x = x + attn
        mlp = matmul(silu(matmul(x, w.up[layer])), w.down[layer])
        x = x + mlp
        for g in range(mc.kv_heads):
            new_k, new_v = kv_new[g]
            for r, p in enumerate(positions):
                cache.append(layer, g, p, new_k[r], new_v[r])
    return x


def reference_prefill(w: Weights, seq: Sequence) -> tuple[Matrix, ShardedKVCache]:
    """Full-prompt forward pass; returns logits for every prompt row.

    The last logits row determines the first generated token.
    """
    mc = w.mc
    if seq.n > mc.max_ctx:
        raise CapacityError(f"prompt of {seq.n} exceeds max_ctx={mc.max_ctx}")
    cache = ShardedKVCache(mc)
    positions = list(range(seq.n))
    x = _embed_rows(w, list(seq.ids), positions)
    x = _forward_rows(w, x, positions, cache)
    return matmul(x, w.lm), cache


def reference_decode_step(w: Weights, cache: ShardedKVCache,
                          last_token: int) -> tuple[int, ShardedKVCache]:
    """One greedy decode step; appends to and returns the same cache."""
    pos = cache.seq_len()
    x = _embed_rows(w, [last_token], [pos])
    x = _forward_rows(w, x, [pos], cache)
    logits = matmul(x, w.lm)
    return argmax_token(logits[0]), cache


def generate(w: Weights, prompt, n_tokens: int) -> list[int]:
    """Greedy generation: the prefill token plus n_tokens - 1 decode steps."""
    if n_tokens < 1:
        raise ConfigError("n_tokens must be >= 1")
    seq = prompt if isinstance(prompt, Sequence) else Sequence(tuple(prompt))
    logits, cache = reference_prefill(w, seq)
    tokens = [argmax_token(logits[-1])]
    for _ in range(n_tokens - 1):
        t, _ = reference_decode_step(w, cache, tokens[-1])
        tokens.append(t)
    return tokens
