"""Dense array helpers shared by every trainable piece of the package.

Matrices are plain row-major numpy arrays. Random streams come from numpy's
PCG64 bit generator (fixed algorithm and constants, reproducible across
platforms for a given seed).
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator. Equal seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed (via SeedSequence)."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` where every output row comes from an identical 1-row kernel call.

    BLAS picks different kernels depending on the number of rows, so the
    same input row can round differently inside batches of different size.
    Row ``i`` of the result here depends only on ``a[i]`` and ``b``.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a[:, None, :], b)[:, 0, :]


def sequential_row_sum(rows: np.ndarray, carry: np.ndarray | None = None) -> np.ndarray:
    """Column sums accumulated strictly row by row, in index order.

    Passing the running total of previous chunks as ``carry`` makes the
    result independent of how the rows were chunked.
    """
    if carry is not None:
        rows = np.concatenate([carry[None, :], rows], axis=0)
    return np.cumsum(rows, axis=0)[-1]


def softmax_stable(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def leaky_relu(v: np.ndarray, slope: float = 0.2) -> np.ndarray:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    return np.where(v > 0, v, slope * v)


def leaky_relu_grad(v: np.ndarray, slope: float = 0.2) -> np.ndarray:
    # derivative at exactly 0 taken as `slope`
    return np.where(v > 0, 1.0, slope).astype(np.asarray(v).dtype, copy=False)


def tanh_act(v: np.ndarray) -> np.ndarray:
    return np.tanh(v)


def grad_check(
    f: Callable[[np.ndarray], float],
    p: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-6,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` at ``p``.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``p`` is
    perturbed in place and restored, so ``f`` may close over it. ``coords``
    restricts the probe to those flat indices.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    flat = p.reshape(-1)
    grad = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if grad.shape != flat.shape:
        raise ShapeError(f"analytic gradient {grad.shape} does not match parameters {flat.shape}")
    worst = 0.0
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(p))
        flat[i] = orig - eps
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective when probing coordinate {i}")
        num = (fp - fm) / (2.0 * eps)
        a = grad[i]
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        worst = max(worst, err)
    return worst
