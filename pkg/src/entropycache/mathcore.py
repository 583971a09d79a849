"""Dense float32 kernels shared by the model, decoder and metrics.

All kernels take and return numpy arrays. Matrices are float32 and row-major;
callers own the buffers. Nothing here keeps state except :class:`OpCounter`,
which is an explicit accumulator passed in by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLogits, OddRotaryDim, ZeroNormVector

F32 = np.float32
ROPE_BASE = 10000.0


@dataclass
class OpCounter:
    """Accumulates scalar operation counts.

    ``macs`` counts multiply-adds performed by :func:`matmul`; ``ops`` counts
    the elementwise work charged by the decision kernels.
    """

    macs: int = 0
    ops: int = 0

    def reset(self) -> None:
        self.macs = 0
        self.ops = 0


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """``a @ b`` in float32, charging ``m*k*n`` multiply-adds to ``counter``.

    Leading axes of ``a`` (and matching batch axes of ``b``) multiply into ``m``.
    """
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"shape mismatch {a.shape} @ {b.shape}")
    if counter is not None:
        m = int(np.prod(a.shape[:-1]))
        counter.macs += m * a.shape[-1] * b.shape[-1]
    return np.matmul(a, b, dtype=F32)


def softmax_row(logits) -> np.ndarray:
    """Max-subtracted softmax along the last axis.

    Accepts a vector or a matrix (softmax per row).
    """
    x = np.asarray(logits, dtype=F32)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NonFiniteLogits("logits contain NaN or inf")
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z, dtype=F32)
    return e / np.sum(e, axis=-1, keepdims=True, dtype=F32)


def entropy(p, counter: OpCounter | None = None) -> float:
    """Shannon entropy in nats, with ``0 * log 0 = 0``.

    The terms are summed in ascending order of probability, so the result
    does not depend on the input ordering (equal entries give equal terms,
    so sort stability is irrelevant). Terms and the running sum use float64
    to hold the ``ln V`` bound to 1e-6 for V up to 1024.
    """
    q = np.sort(np.asarray(p, dtype=F32).ravel()).astype(np.float64)
    if counter is not None:
        # log, multiply, accumulate per entry
        counter.ops += 3 * q.size
    nz = q[q > 0.0]
    terms = nz * np.log(nz)
    h = -float(np.add.reduce(terms)) if terms.size else 0.0
    return max(h, 0.0)


def cosine_distance(a, b) -> float:
    """``1 - a.b / (|a| |b|)``, evaluated in float64, clamped to [0, 2]."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    nx = math.sqrt(float(np.dot(x, x)))
    ny = math.sqrt(float(np.dot(y, y)))
    if nx < 1e-12 or ny < 1e-12:
        raise ZeroNormVector("cosine distance of a zero-norm vector")
    d = 1.0 - float(np.dot(x, y)) / (nx * ny)
    return min(max(d, 0.0), 2.0)


def rope_angles(positions, dim: int) -> np.ndarray:
    """Rotation angles ``pos * base^(-2m/dim)``, shape ``(len(positions), dim//2)``."""
    if dim % 2:
        raise OddRotaryDim(f"rotary dimension must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    m = np.arange(dim // 2, dtype=np.float64)
    inv_freq = ROPE_BASE ** (-2.0 * m / dim)
    return pos * inv_freq[None, :]


def rotary_rotate(qk: np.ndarray, positions) -> np.ndarray:
    """Rotate adjacent pairs ``(2m, 2m+1)`` of each row by its position's angles.

    ``qk`` may carry leading head axes as ``(rows, heads, dim)``; the angle
    schedule is then applied per head over ``dim``.
    """
    x = np.asarray(qk, dtype=F32)
    dim = x.shape[-1]
    if dim % 2:
        raise OddRotaryDim(f"rotary dimension must be even, got {dim}")
    pos = np.asarray(positions)
    if pos.shape[0] != x.shape[0]:
        raise ValueError("positions length must equal number of rows")
    ang = rope_angles(pos, dim)
    cos = np.cos(ang).astype(F32)
    sin = np.sin(ang).astype(F32)
    if x.ndim == 3:
        cos = cos[:, None, :]
        sin = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    ms = np.mean(np.square(x, dtype=F32), axis=-1, keepdims=True, dtype=F32)
    return (x / np.sqrt(ms + F32(eps))) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (F32(1.0) + np.exp(-np.clip(x, -80.0, 80.0), dtype=F32))
