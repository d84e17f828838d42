"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Every forward kernel that needs a backward returns whatever the
backward needs, and the backward returns gradients for each input.
"""

from __future__ import annotations

import zlib

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


# ---------------------------------------------------------------- rng


def make_rng(seed: int, *streams: str | int) -> np.random.Generator:
    """PCG64 generator for ``seed`` split into an independent named stream.

    Stream names are hashed with CRC32 so the derivation is stable across
    processes and Python versions (unlike ``hash``).
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in streams:
        key.append(zlib.crc32(s.encode()) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# ---------------------------------------------------------------- linear algebra


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def linear_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """y = x W^T for x[..., d_in] and W[d_out, d_in]."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape} vs weight {w.shape}")
    return x @ w.T


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray, need_dw: bool = True):
    dx = dy @ w
    dw = None
    if need_dw:
        dw = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return dx, dw


# ---------------------------------------------------------------- softmax / loss


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over rows and its gradient w.r.t. logits."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects m x v logits, got {logits.shape}")
    m, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (m,):
        raise DimensionError(f"targets shape {targets.shape} vs {m} rows")
    if m and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    logp = log_softmax_rows(logits)
    rows = np.arange(m)
    loss = float(-logp[rows, targets].mean())
    d = np.exp(logp)
    d[rows, targets] -= 1.0
    d /= m
    return loss, d


# ---------------------------------------------------------------- layer kernels

RMS_EPS = 1e-6


def rmsnorm_fwd(x: np.ndarray, g: np.ndarray, eps: float = RMS_EPS):
    if x.shape[-1] != g.shape[0]:
        raise DimensionError(f"rmsnorm: input {x.shape} vs gain {g.shape}")
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * inv
    return xhat * g, (xhat, inv)


def rmsnorm_bwd(dy: np.ndarray, g: np.ndarray, saved):
    xhat, inv = saved
    dg = (dy * xhat).reshape(-1, g.shape[0]).sum(axis=0)
    dxhat = dy * g
    d = xhat.shape[-1]
    dx = inv * (dxhat - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)
    return dx, dg


def silu_fwd(x: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def silu_bwd(dy: np.ndarray, x: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return dy * sig * (1.0 + x * (1.0 - sig))


def embedding_fwd(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return table[idx]


def embedding_bwd(dy: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    d = np.zeros((n_rows, dy.shape[-1]), dtype=DTYPE)
    np.add.at(d, np.asarray(idx).reshape(-1), dy.reshape(-1, dy.shape[-1]))
    return d
