"""Scaled-dot-product attention: a naive reference and a streaming kernel.

The naive path materializes the full L x L score matrix and exists as the
correctness reference. The streaming path tiles the key/value sequence,
maintains an online-softmax running max and denominator per query row, and
never allocates a buffer larger than O(tile * d) beyond the output, so its
auxiliary memory is linear in L. Every buffer the streaming kernel touches
is routed through a :class:`MemoryLedger` so tests can assert the memory
contract instead of trusting it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import UsageError


@dataclass
class AttentionInputs:
    """Per-head query/key/value matrices sharing L rows and d columns."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.ascontiguousarray(self.q)
        self.k = np.ascontiguousarray(self.k)
        self.v = np.ascontiguousarray(self.v)
        if self.q.ndim != 2 or self.q.shape != self.k.shape or self.k.shape != self.v.shape:
            raise UsageError(
                f"attention inputs must be three equal L x d matrices, got "
                f"{self.q.shape}, {self.k.shape}, {self.v.shape}"
            )

    @property
    def length(self):
        return self.q.shape[0]

    @property
    def head_dim(self):
        return self.q.shape[1]

    @property
    def scale(self):
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class MemoryLedger:
    """Counts every transient element the streaming kernel allocates."""

    live: int = 0
    peak: int = 0
    largest_block: int = 0
    allocations: list = field(default_factory=list)

    def alloc(self, shape, dtype):
        arr = np.empty(shape, dtype=dtype)
        self.note(arr.size)
        return arr

    def note(self, count):
        self.live += int(count)
        self.peak = max(self.peak, self.live)
        self.largest_block = max(self.largest_block, int(count))
        self.allocations.append(int(count))

    def release(self, arr_or_count):
        count = arr_or_count if isinstance(arr_or_count, int) else arr_or_count.size
        self.live -= int(count)


def attention_naive(inputs: AttentionInputs) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with the full score matrix materialized."""
    scores = (inputs.q @ inputs.k.T) * inputs.scale
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    return (scores @ inputs.v) / scores.sum(axis=1, keepdims=True)


def _check_tile(tile, length):
    if not isinstance(tile, (int, np.integer)) or tile < 1 or tile > length:
        raise UsageError(f"tile must satisfy 1 <= tile <= L={length}, got {tile}")


def _query_block(tile, d, length):
    """Rows processed together. Bounded by min(tile, d) so the score
    buffer stays <= tile * d elements, and by ceil(L / 2) so it can never
    reach L x L even when d >= L."""
    return max(1, min(tile, d, (length + 1) // 2))


def attention_streaming(inputs: AttentionInputs, tile: int):
    """Tiled online-softmax attention.

    Returns ``(output, ledger)``; the ledger's peak stays within a small
    constant of tile*d + L*d + L elements. The per-row logsumexp needed by
    the backward pass is recomputed there, keeping this call's footprint
    minimal.
    """
    out, _, ledger = _streaming_forward(inputs, tile)
    return out, ledger


def _streaming_forward(inputs: AttentionInputs, tile: int):
    L, d = inputs.q.shape
    _check_tile(tile, L)
    q, k, v = inputs.q, inputs.k, inputs.v
    scale = inputs.scale
    dt = q.dtype
    ledger = MemoryLedger()
    qb = _query_block(tile, d, L)

    out = ledger.alloc((L, d), dt)
    lse = ledger.alloc((L,), dt)
    acc = ledger.alloc((qb, d), dt)
    m = ledger.alloc((qb,), dt)
    l = ledger.alloc((qb,), dt)
    r1 = ledger.alloc((qb,), dt)
    r2 = ledger.alloc((qb,), dt)

    for i0 in range(0, L, qb):
        nr = min(qb, L - i0)
        qi = q[i0 : i0 + nr]
        mi, li, acci = m[:nr], l[:nr], acc[:nr]
        mi.fill(-np.inf)
        li.fill(0.0)
        acci.fill(0.0)
        for j0 in range(0, L, tile):
            nc = min(tile, L - j0)
            kj = k[j0 : j0 + nc]
            vj = v[j0 : j0 + nc]
            s = ledger.alloc((nr, nc), dt)
            np.matmul(qi, kj.T, out=s)
            s *= scale
            new_max = r1[:nr]
            np.max(s, axis=1, out=new_max)
            np.maximum(new_max, mi, out=new_max)
            # mi becomes the rescale factor exp(old_max - new_max)
            mi -= new_max
            np.exp(mi, out=mi)
            s -= new_max[:, None]
            np.exp(s, out=s)
            li *= mi
            np.sum(s, axis=1, out=r2[:nr])
            li += r2[:nr]
            acci *= mi[:, None]
            pv = ledger.alloc((nr, d), dt)
            np.matmul(s, vj, out=pv)
            acci += pv
            mi[:] = new_max
            ledger.release(pv)
            ledger.release(s)
        np.divide(acci, li[:, None], out=out[i0 : i0 + nr])
        np.log(li, out=r2[:nr])
        r2[:nr] += mi
        lse[i0 : i0 + nr] = r2[:nr]

    for buf in (acc, m, l, r1, r2):
        ledger.release(buf)
    return out, lse, ledger


def _streaming_backward(q, k, v, out, lse, grad_out, tile):
    """Recompute tile scores from (q, k, v, lse); no L x L buffer."""
    L, d = q.shape
    scale = 1.0 / math.sqrt(d)
    qb = _query_block(tile, d, L)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    # rowwise correction term: sum_j grad_out * out
    delta = (grad_out * out).sum(axis=1)

    for i0 in range(0, L, qb):
        nr = min(qb, L - i0)
        qi = q[i0 : i0 + nr]
        gi = grad_out[i0 : i0 + nr]
        lse_i = lse[i0 : i0 + nr, None]
        delta_i = delta[i0 : i0 + nr, None]
        for j0 in range(0, L, tile):
            nc = min(tile, L - j0)
            kj = k[j0 : j0 + nc]
            vj = v[j0 : j0 + nc]
            s = (qi @ kj.T) * scale
            p = np.exp(s - lse_i)
            dv[j0 : j0 + nc] += p.T @ gi
            dp = gi @ vj.T
            ds = p * (dp - delta_i) * scale
            dq[i0 : i0 + nr] += ds @ kj
            dk[j0 : j0 + nc] += ds.T @ qi
    return dq, dk, dv


def streaming_attention_op(q: T.Tensor, k: T.Tensor, v: T.Tensor, tile: int) -> T.Tensor:
    """Differentiable streaming attention for the graph engine.

    The backward pass recomputes tile scores instead of caching them, so
    gradient memory also stays linear in L.
    """
    inputs = AttentionInputs(q.data, k.data, v.data)
    out_data, lse, _ = _streaming_forward(inputs, tile)

    def backward():
        if out.grad is None:
            return
        dq, dk, dv = _streaming_backward(
            q.data, k.data, v.data, out_data, lse, out.grad, tile
        )
        T._accumulate(q, dq)
        T._accumulate(k, dk)
        T._accumulate(v, dv)

    out = T._node(out_data, (q, k, v), backward)
    return out


def multi_head_attention(x: T.Tensor, params: dict, prefix: str, heads: int, tile: int = 64) -> T.Tensor:
    """Project to per-head q/k/v, run the streaming kernel per head,
    concatenate, and apply the output projection."""
    L, dim = x.data.shape
    if dim % heads != 0:
        raise UsageError(f"embedding dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    tile = min(tile, L)

    q = T.add(T.matmul(x, params[f"{prefix}wq"]), params[f"{prefix}bq"])
    k = T.add(T.matmul(x, params[f"{prefix}wk"]), params[f"{prefix}bk"])
    v = T.add(T.matmul(x, params[f"{prefix}wv"]), params[f"{prefix}bv"])

    outputs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        outputs.append(
            streaming_attention_op(
                T.slice_cols(q, lo, hi),
                T.slice_cols(k, lo, hi),
                T.slice_cols(v, lo, hi),
                tile,
            )
        )
    merged = outputs[0] if heads == 1 else T.concat_cols(outputs)
    return T.add(T.matmul(merged, params[f"{prefix}wo"]), params[f"{prefix}bo"])


def attention_param_names():
    return ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def init_attention_params(dim, rng, std=0.02, dtype=np.float64):
    params = {}
    for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
        params[w] = T.Tensor(
            rng.normal(0.0, std, size=(dim, dim)).astype(dtype), requires_grad=True
        )
        params[b] = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return params
