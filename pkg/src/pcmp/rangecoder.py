"""Adaptive multi-symbol range coder over byte alphabets.

Integer-only arithmetic (32-bit range, carry propagation through a cached
byte run) so the output is identical on every platform.  Probabilities come
from per-context frequency tables that encoder and decoder update the same
way after every symbol.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numba
import numpy as np

from .errors import CorruptStream

ALPHABET = 256
TOP = 1 << 24
RANGE_INIT = 0xFFFFFFFF
COUNT_LIMIT = 1 << 16
INCREMENT = 32
FLUSH_BYTES = 4


class ContextModel:
    """Laplace-initialized adaptive frequency tables, one row per context id.

    After each coded symbol its count grows by ``increment``; a row whose
    total would exceed ``limit`` is halved with every count floored at 1.
    """

    def __init__(self, n_contexts: int = 256, increment: int = INCREMENT, limit: int = COUNT_LIMIT):
        if limit > COUNT_LIMIT:
            raise ValueError("count limit above 2**16 breaks the 16-bit precision of the coder")
        self.increment = int(increment)
        self.limit = int(limit)
        self.counts = np.ones((n_contexts, ALPHABET), dtype=np.int64)
        self.totals = np.full(n_contexts, ALPHABET, dtype=np.int64)

    @property
    def n_contexts(self) -> int:
        return len(self.totals)

    def copy(self) -> "ContextModel":
        out = ContextModel.__new__(ContextModel)
        out.increment, out.limit = self.increment, self.limit
        out.counts, out.totals = self.counts.copy(), self.totals.copy()
        return out

    def probability(self, context: int, symbol: int) -> float:
        return self.counts[context, symbol] / self.totals[context]

    def update(self, context: int, symbol: int) -> None:
        _update(self.counts, self.totals, context, symbol, self.increment, self.limit)


@numba.njit(cache=True)
def _update(counts, totals, ctx, sym, inc, limit):
    counts[ctx, sym] += inc
    totals[ctx] += inc
    if totals[ctx] > limit:
        t = 0
        for k in range(counts.shape[1]):
            c = counts[ctx, k] >> 1
            if c < 1:
                c = 1
            counts[ctx, k] = c
            t += c
        totals[ctx] = t


@numba.njit(cache=True)
def _shift_low(state, out):
    # state = [low, cache, cache_size, pos]
    low = state[0]
    if low < 0xFF000000 or low >= (np.int64(1) << 32):
        carry = low >> 32
        temp = state[1]
        while True:
            out[state[3]] = (temp + carry) & 0xFF
            state[3] += 1
            temp = 0xFF
            state[2] -= 1
            if state[2] == 0:
                break
        state[1] = (low >> 24) & 0xFF
    state[2] += 1
    state[0] = (low & 0x00FFFFFF) << 8


@numba.njit(cache=True)
def _encode(symbols, contexts, counts, totals, inc, limit):
    n = len(symbols)
    out = np.empty(3 * n + 16, dtype=np.uint8)
    state = np.zeros(4, dtype=np.int64)
    state[2] = 1
    rng = np.int64(RANGE_INIT)
    for i in range(n):
        ctx = contexts[i]
        s = symbols[i]
        cum = np.int64(0)
        for k in range(s):
            cum += counts[ctx, k]
        r = rng // totals[ctx]
        state[0] += r * cum
        rng = r * counts[ctx, s]
        _update(counts, totals, ctx, s, inc, limit)
        while rng < TOP:
            rng <<= 8
            _shift_low(state, out)
    for _ in range(FLUSH_BYTES + 1):
        _shift_low(state, out)
    # the first emitted byte is always zero
    return out[1:state[3]].copy()


@numba.njit(cache=True)
def _decode(payload, contexts, count, counts, totals, inc, limit):
    """Returns (symbols, bytes consumed, ok flag)."""
    out = np.empty(count, dtype=np.uint8)
    if count == 0:
        return out, 0, True
    m = len(payload)
    if m < FLUSH_BYTES:
        return out, m, False
    code = np.int64(0)
    for pos in range(FLUSH_BYTES):
        code = (code << 8) | np.int64(payload[pos])
    pos = FLUSH_BYTES
    rng = np.int64(RANGE_INIT)
    for i in range(count):
        ctx = contexts[i]
        tot = totals[ctx]
        r = rng // tot
        v = code // r
        if v >= tot:
            return out, pos, False
        s = 0
        cum = np.int64(0)
        while cum + counts[ctx, s] <= v:
            cum += counts[ctx, s]
            s += 1
        code -= r * cum
        rng = r * counts[ctx, s]
        out[i] = s
        _update(counts, totals, ctx, s, inc, limit)
        while rng < TOP:
            if pos >= m:
                return out, pos, False
            code = (code << 8) | np.int64(payload[pos])
            pos += 1
            rng <<= 8
    return out, pos, True


def _as_contexts(contexts, count: int, n_contexts: int) -> np.ndarray:
    if callable(contexts):
        ctx = np.fromiter((contexts(i) for i in range(count)), dtype=np.int64, count=count)
    else:
        ctx = np.ascontiguousarray(contexts, dtype=np.int64)
    if len(ctx) != count:
        raise ValueError(f"{len(ctx)} contexts for {count} symbols")
    if count and (ctx.min() < 0 or ctx.max() >= n_contexts):
        raise ValueError("context id outside the model's table")
    return ctx


def arith_encode(symbols: Sequence[int], contexts: Sequence[int], model: ContextModel) -> bytes:
    """Encode byte symbols, each coded against the table of its context.

    ``model`` is updated in place exactly as the decoder will update its copy.
    """
    sym = np.ascontiguousarray(symbols, dtype=np.int64)
    if len(sym) and (sym.min() < 0 or sym.max() >= ALPHABET):
        raise ValueError("symbols must be bytes")
    ctx = _as_contexts(contexts, len(sym), model.n_contexts)
    out = _encode(sym.astype(np.uint8), ctx, model.counts, model.totals, model.increment, model.limit)
    return out.tobytes()


def arith_decode(
    payload: bytes,
    contexts: Sequence[int] | Callable[[int], int],
    count: int,
    model: ContextModel,
    *,
    consumed: list | None = None,
) -> np.ndarray:
    """Decode exactly ``count`` symbols.

    ``contexts`` is a sequence or a callable taking the symbol position.  When
    ``consumed`` is given the number of payload bytes read is appended to it.
    """
    if count == 0:
        if consumed is not None:
            consumed.append(0)
        return np.empty(0, dtype=np.uint8)
    ctx = _as_contexts(contexts, count, model.n_contexts)
    buf = np.frombuffer(bytes(payload), dtype=np.uint8)
    out, pos, ok = _decode(buf, ctx, count, model.counts, model.totals, model.increment, model.limit)
    if consumed is not None:
        consumed.append(int(pos))
    if not ok:
        raise CorruptStream(f"payload exhausted or invalid after {pos} of {len(buf)} bytes")
    return out
