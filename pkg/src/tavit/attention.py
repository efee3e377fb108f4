"""Scaled dot-product attention, dense and tiled.

``attention_tiled`` streams over key/value tiles with an online softmax, so
it never holds more than a ``tile x tile`` block of logits. Its backward pass
recomputes those blocks from the saved per-row log-sum-exp instead of storing
the attention matrix.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, matmul, mul, softmax, transpose


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim < 2 or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query/key head dims differ, {q.shape} vs {k.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: key/value token layouts differ, {k.shape} vs {v.shape}")
    if q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: batch dims differ, {q.shape} vs {k.shape}")


def attention_naive(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V, materializing the full logit matrix."""
    _check_qkv(q, k, v)
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    logits = mul(matmul(q, transpose(k, axes)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(logits, axis=-1), v)


def _tiles(n: int, tile: int) -> list[slice]:
    return [slice(s, min(s + tile, n)) for s in range(0, n, tile)]


def attention_tiled(q: Tensor, k: Tensor, v: Tensor, tile: int = 64, kv_order: Sequence[int] | None = None) -> Tensor:
    """Exact attention computed tile by tile with a running max and normalizer.

    ``kv_order`` permutes the order in which key/value tiles are visited; the
    result does not depend on it beyond rounding.
    """
    _check_qkv(q, k, v)
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    qd, kd, vd = q.data, k.data, v.data
    tq, tk = qd.shape[-2], kd.shape[-2]
    scale = 1.0 / math.sqrt(qd.shape[-1])
    q_tiles = _tiles(tq, tile)
    kv_tiles = _tiles(tk, tile)
    if kv_order is not None:
        if sorted(kv_order) != list(range(len(kv_tiles))):
            raise ValueError(f"kv_order must be a permutation of range({len(kv_tiles)})")
        kv_tiles = [kv_tiles[i] for i in kv_order]

    out = np.empty(qd.shape[:-1] + (vd.shape[-1],), dtype=qd.dtype)
    lse = np.empty(qd.shape[:-1], dtype=qd.dtype)
    for qs in q_tiles:
        qb = qd[..., qs, :] * scale
        row_max = np.full(qb.shape[:-1] + (1,), -np.inf, dtype=qd.dtype)
        denom = np.zeros_like(row_max)
        acc = np.zeros(qb.shape[:-1] + (vd.shape[-1],), dtype=qd.dtype)
        for ks in kv_tiles:
            s = qb @ np.swapaxes(kd[..., ks, :], -1, -2)
            new_max = np.maximum(row_max, s.max(axis=-1, keepdims=True))
            p = np.exp(s - new_max)
            corr = np.exp(row_max - new_max)
            denom = denom * corr + p.sum(axis=-1, keepdims=True)
            acc = acc * corr + p @ vd[..., ks, :]
            row_max = new_max
        out[..., qs, :] = acc / denom
        lse[..., qs] = (row_max + np.log(denom))[..., 0]

    def backward(g):
        dq = np.zeros_like(qd)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        # rowsum(dO * O) per query row
        delta = (g * out).sum(axis=-1, keepdims=True)
        for qs in q_tiles:
            qb = qd[..., qs, :]
            gb = g[..., qs, :]
            lb = lse[..., qs, None]
            db = delta[..., qs, :]
            for ks in kv_tiles:
                kb, vb = kd[..., ks, :], vd[..., ks, :]
                p = np.exp((qb @ np.swapaxes(kb, -1, -2)) * scale - lb)
                dv[..., ks, :] += np.swapaxes(p, -1, -2) @ gb
                dp = gb @ np.swapaxes(vb, -1, -2)
                ds = p * (dp - db) * scale
                dq[..., qs, :] += ds @ kb
                dk[..., ks, :] += np.swapaxes(ds, -1, -2) @ qb
        return dq, dk, dv

    return Tensor._make(out, (q, k, v), backward, "attention_tiled")


def attention(q: Tensor, k: Tensor, v: Tensor, kind: str = "tiled", tile: int = 64) -> Tensor:
    if kind == "tiled":
        return attention_tiled(q, k, v, tile=tile)
    if kind == "naive":
        return attention_naive(q, k, v)
    raise ValueError(f"unknown attention kind {kind!r}")
