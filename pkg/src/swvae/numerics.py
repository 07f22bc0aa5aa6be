"""Numerical substrate: shape checks, seeded RNG streams, Adam, and a
finite-difference gradient checker.

Matrices are plain 64-bit numpy arrays. Diagonal covariances are stored as
positive real vectors throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FLOAT = np.float64


class ShapeError(ValueError):
    """Raised when array shapes disagree. No implicit broadcasting is done."""


class NumericalError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def check_shape(name: str, arr: np.ndarray, shape: tuple) -> None:
    """Check ``arr.shape`` against ``shape``; ``None`` entries match anything."""
    if arr.ndim != len(shape) or any(
        s is not None and a != s for a, s in zip(arr.shape, shape)
    ):
        raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")


def check_same_shape(**arrays: np.ndarray) -> None:
    shapes = {k: np.shape(v) for k, v in arrays.items()}
    if len(set(shapes.values())) > 1:
        raise ShapeError(f"shape mismatch: {shapes}")


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: non-finite values encountered")


# --------------------------------------------------------------------------
# random numbers


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded from a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams (one per utterance or worker)."""
    children = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def sample_standard_normal(rng: np.random.Generator, n) -> np.ndarray:
    """``n`` i.i.d. N(0, 1) draws; ``n`` may be a count or a shape tuple."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    if len(shape) == 0 or any(int(s) < 1 for s in shape):
        raise ValueError(f"sample size must be >= 1, got {n}")
    return rng.standard_normal(shape)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    shape: tuple
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        self.shape = tuple(np.atleast_1d(np.empty(self.shape)).shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)

    @classmethod
    def like(cls, params: np.ndarray, lr: float, **kw) -> "AdamState":
        return cls(lr=lr, shape=np.shape(params), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam descent step with bias correction; returns new params.

    Works elementwise, so ``params`` may be any array matching the state's
    shape. To ascend, pass the negated gradient.
    """
    params = np.asarray(params, dtype=FLOAT)
    grads = np.asarray(grads, dtype=FLOAT)
    if params.shape != state.shape or grads.shape != state.shape:
        raise ShapeError(
            f"adam_step: params {params.shape}, grads {grads.shape}, "
            f"state {state.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads.ravel()))
        raise NumericalError(
            f"adam_step: non-finite gradient at {bad.size} entries (first {bad[:5]})"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=FLOAT)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite_diff_grad: f non-finite around coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max coordinate-wise |a - n| / |n|.

    The denominator is floored at 1e-7 times the largest numeric gradient
    entry (and at 1e-12) so near-zero coordinates do not amplify roundoff.
    """
    analytic = np.asarray(analytic, dtype=FLOAT)
    numeric = np.asarray(numeric, dtype=FLOAT)
    check_same_shape(analytic=analytic, numeric=numeric)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1.0)
    denom = np.maximum(np.abs(numeric), max(1e-7 * scale, 1e-12))
    err = np.abs(analytic - numeric) / denom
    return float(np.max(err, initial=0.0))


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-4,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences."""
    f0 = f(np.array(x, dtype=FLOAT))
    if not np.isfinite(f0):
        raise NumericalError("finite_diff_check: f is non-finite at x")
    numeric = finite_diff_grad(f, x, h)
    return relative_error(analytic_grad, numeric)
