"""Dense float64 arithmetic, seeded randomness and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Random streams come from numpy's PCG64 bit generator, which is fixed
and documented to produce identical streams for identical seeds on every
platform numpy supports.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

DEFAULT_FD_STEP = 1e-5


def as_tensor(x, shape: Sequence[int] | None = None) -> Tensor:
    """Return ``x`` as a contiguous float64 array, optionally reshaped."""
    t = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64). Equal seeds give bitwise-equal streams."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent child generators derived deterministically from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def l2_norm(v: Tensor, row: int | None = None) -> float:
    """Euclidean norm of the whole tensor, or of one row of a 2-D tensor."""
    v = np.asarray(v, dtype=np.float64)
    if row is not None:
        if v.ndim != 2:
            raise ValueError(f"row norm needs a 2-D tensor, got shape {v.shape}")
        if not -v.shape[0] <= row < v.shape[0]:
            raise IndexError(f"row {row} out of range for {v.shape[0]} rows")
        v = v[row]
    return float(np.sqrt(np.sum(v * v)))


def row_norms(x: Tensor) -> Tensor:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def xavier_init(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape: Sequence[int]
) -> Tensor:
    """Uniform Glorot initialisation on [-sqrt(6/(fan_in+fan_out)), +sqrt(...)]."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


def finite_diff_grad(
    f: Callable[[Tensor], float], x: Tensor, h: float = DEFAULT_FD_STEP
) -> Tensor:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is never modified; each probe evaluates ``f`` on a perturbed copy.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    probe = x.copy()
    flat_probe = probe.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_probe.size):
        orig = flat_probe[i]
        flat_probe[i] = orig + h
        fp = float(f(probe))
        flat_probe[i] = orig - h
        fm = float(f(probe))
        flat_probe[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        flat_grad[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-12) -> float:
    """Normwise relative error max|a - n| / max(max|a|, max|n|).

    Elementwise ratios are meaningless for components that are both ~0, so
    the error is scaled by the largest magnitude in either tensor.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale
