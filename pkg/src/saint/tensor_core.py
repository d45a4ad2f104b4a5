"""Deterministic float32 kernels and a seeded RNG.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. Every
reduction here walks its axis in a fixed index order so results are
bit-reproducible and can be matched exactly by a naive loop.
"""

from __future__ import annotations

import math

import numpy as np

F32 = np.float32

# gelu tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
_GELU_C = F32(math.sqrt(2.0 / math.pi))
_GELU_A = F32(0.044715)

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with leading axes broadcast.

    Accumulates ``k = 0 .. K-1`` in order, rounding to float32 after every
    multiply and every add, i.e. exactly what ``acc = acc + a[i,k]*b[k,j]``
    does in a float32 triple loop.
    """
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=F32)
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    if bias is not None:
        y += bias
    return y


def seq_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` in ascending index order (no pairwise summation)."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    acc = np.zeros(x.shape[:-1], dtype=x.dtype)
    for i in range(x.shape[-1]):
        acc = acc + x[..., i]
    return acc


def seq_mean(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[axis]
    return (seq_sum(x, axis) / x.dtype.type(n)).astype(x.dtype)


def l2_norm(x: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis, keepdims, sequential accumulation."""
    x = as_f32(x)
    return np.sqrt(seq_sum(x * x, -1))[..., None]


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    x = as_f32(x)
    m = np.max(x, axis=-1, keepdims=True)
    # a fully -inf row yields nan; causal masks always keep the diagonal
    e = np.exp(x - m)
    return (e / seq_sum(e, -1)[..., None]).astype(F32)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    x = as_f32(x)
    mu = seq_mean(x, -1)[..., None]
    xc = x - mu
    var = seq_mean(xc * xc, -1)[..., None]
    return (xc / np.sqrt(var + F32(eps)) * gain + bias).astype(F32)


def gelu(x: np.ndarray) -> np.ndarray:
    x = as_f32(x)
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return (F32(0.5) * x * (F32(1.0) + np.tanh(inner))).astype(F32)


class Rng:
    """Seeded stream backed by numpy's PCG64 bit generator.

    PCG64 output for a given seed is identical on every platform numpy
    supports. One Rng belongs to one consumer; do not share it.
    """

    def __init__(self, seed: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, dims, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(tuple(dims)) * scale).astype(F32)

    def uniform(self, dims, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, tuple(dims)).astype(F32)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct integers from [0, n), uniformly, in sampled order."""
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_normal(rng: Rng, dims, scale: float = 1.0) -> np.ndarray:
    return rng.normal(dims, scale)


def rng_uniform(rng: Rng, dims, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return rng.uniform(dims, low, high)
