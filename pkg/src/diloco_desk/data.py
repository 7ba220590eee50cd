"""Synthetic token corpora, worker shards and sliding-window batches.

Two generators:

* ``markov-chain``: a first-order chain whose row-stochastic transition
  matrix is drawn from ``(transition_seed, shift_id)``. Rows are
  ``softmax(sharpness * z)`` with standard-normal ``z``, blended with the
  identity by ``self_loop``.
* ``arithmetic-expr``: ``a<op>b=c;`` equations over a fixed 15-symbol
  vocabulary (digits 0-9 are ids 0-9, then ``+ - * = ;``).

Corpora are written to disk as little-endian uint16 token ids.
"""

from __future__ import annotations

import bisect
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import Batch
from .numkit import Rng, derive_seed

__all__ = [
    "CorpusSpec",
    "Shard",
    "ARITH_SYMBOLS",
    "generate_corpus",
    "materialize_corpus",
    "shard_corpus",
    "next_batch",
    "window_count",
    "save_corpus",
    "load_corpus",
    "decode_arithmetic",
    "bigram_tv_distance",
]

GENERATORS = ("markov-chain", "arithmetic-expr")
ARITH_SYMBOLS = "0123456789+-*=;"
_ARITH_ID = {ch: i for i, ch in enumerate(ARITH_SYMBOLS)}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    generator: str = "markov-chain"
    vocab_size: int = 32
    transition_seed: int = 0
    length: int = 100_000
    shift_id: str = "base"
    # markov-chain knobs
    sharpness: float = 3.0
    self_loop: float = 0.0
    # arithmetic-expr knobs
    operators: str = "+-"
    max_operand: int = 99
    # token file: imported when it exists, otherwise written after generation
    path: Optional[str] = None

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise DataError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.length < 1:
            raise DataError("length must be >= 1")
        if self.vocab_size > 65536:
            raise DataError("vocab_size must fit in 16 bits")
        if self.generator == "markov-chain":
            if self.vocab_size < 2:
                raise DataError("markov-chain needs vocab_size >= 2")
            if not 0.0 <= self.self_loop <= 1.0:
                raise DataError("self_loop must lie in [0, 1]")
        else:
            if self.vocab_size < len(ARITH_SYMBOLS):
                raise DataError(
                    f"arithmetic-expr needs vocab_size >= {len(ARITH_SYMBOLS)}, "
                    f"got {self.vocab_size}"
                )
            if not self.operators or set(self.operators) - set("+-*"):
                raise DataError("operators must be a non-empty subset of '+-*'")
            if self.max_operand < 0:
                raise DataError("max_operand must be >= 0")


def transition_matrix(spec: CorpusSpec) -> np.ndarray:
    V = spec.vocab_size
    rng = Rng(derive_seed(spec.transition_seed, "markov", spec.shift_id), 0)
    z = rng.normal(V * V).reshape(V, V) * spec.sharpness
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return spec.self_loop * np.eye(V) + (1.0 - spec.self_loop) * p


def materialize_corpus(spec: CorpusSpec) -> np.ndarray:
    """Corpus for ``spec``, going through ``spec.path`` when one is set."""
    if spec.path is None:
        return generate_corpus(spec)
    if os.path.exists(spec.path):
        tokens = load_corpus(spec.path)
        if tokens.size and tokens.max() >= spec.vocab_size:
            raise DataError(f"{spec.path}: token id {tokens.max()} >= vocab_size")
        return tokens
    tokens = generate_corpus(spec)
    save_corpus(tokens, spec.path)
    return tokens


def generate_corpus(spec: CorpusSpec, stream: int = 0) -> np.ndarray:
    """Token stream of ``spec.length`` ids.

    ``stream`` selects an independent sample from the same distribution
    (the engine uses stream 1 for the held-out probe batch).
    """
    rng = Rng(derive_seed(spec.transition_seed, "sample", spec.generator, spec.shift_id), stream)
    if spec.generator == "markov-chain":
        return _markov(spec, rng)
    return _arithmetic(spec, rng)


def _markov(spec: CorpusSpec, rng: Rng) -> np.ndarray:
    cdf = np.cumsum(transition_matrix(spec), axis=1)
    cdf[:, -1] = 1.0
    rows = [list(r) for r in cdf]
    u = rng.uniform(spec.length).tolist()
    out = np.empty(spec.length, dtype=np.int64)
    state = int(u[0] * spec.vocab_size)
    V1 = spec.vocab_size - 1
    for i in range(spec.length):
        out[i] = state
        state = min(bisect.bisect_right(rows[state], u[i]), V1)
    return out


def _arithmetic(spec: CorpusSpec, rng: Rng) -> np.ndarray:
    out: list[int] = []
    ops = spec.operators
    # each equation needs at most ~ 2*3 + 6 + 3 symbols; draw in chunks
    while len(out) < spec.length:
        n = 256
        a = rng.integers(n, spec.max_operand + 1)
        b = rng.integers(n, spec.max_operand + 1)
        o = rng.integers(n, len(ops))
        for x, y, k in zip(a.tolist(), b.tolist(), o.tolist()):
            op = ops[k]
            res = x + y if op == "+" else x - y if op == "-" else x * y
            out.extend(_ARITH_ID[ch] for ch in f"{x}{op}{y}={res};")
            if len(out) >= spec.length:
                break
    return np.asarray(out[: spec.length], dtype=np.int64)


def decode_arithmetic(tokens) -> str:
    return "".join(ARITH_SYMBOLS[int(t)] for t in tokens)


def bigram_tv_distance(a, b, vocab_size: int) -> float:
    """Total-variation distance between the empirical bigram distributions."""

    def freq(x):
        x = np.asarray(x, dtype=np.int64)
        counts = np.bincount(x[:-1] * vocab_size + x[1:], minlength=vocab_size * vocab_size)
        return counts / counts.sum()

    return 0.5 * float(np.abs(freq(a) - freq(b)).sum())


def save_corpus(tokens, path: str | os.PathLike) -> None:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() > 0xFFFF):
        raise DataError("token ids must fit in uint16")
    tokens.astype("<u2").tofile(path)


def load_corpus(path: str | os.PathLike) -> np.ndarray:
    return np.fromfile(path, dtype="<u2").astype(np.int64)


@dataclass(frozen=True)
class Shard:
    worker_id: int
    tokens: np.ndarray
    epoch_shuffle_seed: int

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def shard_corpus(
    corpus, k: int, context_length: int = 1, shuffle_seed: int = 0
) -> list[Shard]:
    """Split into ``k`` contiguous equal shards; the remainder is dropped."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if k < 1:
        raise DataError("k must be >= 1")
    if len(corpus) < k * context_length + k:
        raise DataError(
            f"corpus of {len(corpus)} tokens is too short for {k} shards "
            f"with context length {context_length}"
        )
    size = len(corpus) // k
    return [
        Shard(i, corpus[i * size:(i + 1) * size], derive_seed(shuffle_seed, "shard", i))
        for i in range(k)
    ]


def window_count(shard: Shard, context_length: int) -> int:
    return len(shard) - context_length


_PERM_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _epoch_order(shard: Shard, n: int, epoch: int) -> np.ndarray:
    key = (shard.epoch_shuffle_seed, n, epoch)
    perm = _PERM_CACHE.get(key)
    if perm is None:
        if len(_PERM_CACHE) > 256:
            _PERM_CACHE.clear()
        perm = Rng(shard.epoch_shuffle_seed, epoch).permutation(n)
        _PERM_CACHE[key] = perm
    return perm


def next_batch(
    shard: Shard, cursor: int, batch_size: int, context_length: int, vocab_size: int
) -> tuple[Batch, int]:
    """Take ``batch_size`` windows starting at ``cursor``.

    ``cursor`` counts windows consumed so far. Window ``i`` is
    ``tokens[i:i+C] -> tokens[i+C]``; each epoch visits all windows once in
    an order fixed by ``(epoch_shuffle_seed, epoch)`` and the next epoch
    reshuffles.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = window_count(shard, context_length)
    if n < 1:
        raise DataError(
            f"context length {context_length} leaves no windows in a shard of {len(shard)}"
        )
    idx = np.empty(batch_size, dtype=np.int64)
    filled = 0
    pos = cursor
    while filled < batch_size:
        epoch, start = divmod(pos, n)
        take = min(batch_size - filled, n - start)
        idx[filled:filled + take] = _epoch_order(shard, n, epoch)[start:start + take]
        filled += take
        pos += take
    offsets = idx[:, None] + np.arange(context_length)[None, :]
    batch = Batch(shard.tokens[offsets], shard.tokens[idx + context_length], vocab_size)
    return batch, cursor + batch_size
