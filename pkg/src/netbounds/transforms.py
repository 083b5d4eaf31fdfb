"""Scalar variational primitives.

Every bound here has the form ``target(x) <= exp(linear(x) - conjugate)`` or
``target(x) >= quadratic(x)`` with a closed-form optimal parameter.  All
functions accept numpy arrays and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

LOG2 = float(np.log(2.0))


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    """``log g(x)`` without overflow for large ``|x|``."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def log1mexp(x):
    """``log(1 - exp(-x))`` for ``x > 0`` (Maechler's branch split)."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x <= LOG2, np.log(-np.expm1(-x)), np.log1p(-np.exp(-x)))


def log_mix(a, p):
    """``log(p exp(a) + 1 - p)`` for ``p`` in [0, 1]; exactly zero at ``a = 0``."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        low = np.logaddexp(np.log(p) + a, np.log1p(-p))
        mid = np.log1p(p * np.expm1(a))
        high = a + np.log1p((1.0 - p) * np.expm1(-a))
    return np.where(a < -1.0, low, np.where(a <= 0.0, mid, high))


def _check_unit(name, v, lo=0.0, hi=1.0):
    v = np.asarray(v, dtype=float)
    if np.any(~(v >= lo)) or np.any(~(v <= hi)):
        raise ValueError(f"{name} must lie in [{lo}, {hi}]")
    return v


def binary_entropy(xi):
    """``-xi log xi - (1-xi) log(1-xi)`` in nats, with ``0 log 0 = 0``."""
    xi = _check_unit("xi", xi)
    return -xlogy(xi, xi) - xlogy(1.0 - xi, 1.0 - xi)


# -- sigmoid: g(x) = min_xi exp(xi x - H(xi)) -----------------------------


def sigmoid_log_bound(x, xi):
    xi = _check_unit("xi", xi)
    return xi * np.asarray(x, dtype=float) - binary_entropy(xi)


def sigmoid_bound(x, xi):
    """Upper bound ``exp(xi x - H(xi)) >= g(x)`` for any ``xi`` in [0, 1]."""
    return np.exp(sigmoid_log_bound(x, xi))


def sigmoid_opt_xi(x):
    return expit(-np.asarray(x, dtype=float))


# -- noisy-OR: 1 - exp(-x) = min_{xi >= 0} exp(xi x - F(xi)) --------------


def noisy_or_conjugate(xi):
    """``F(xi) = -xi log xi + (xi + 1) log(xi + 1)``, ``F(0) = 0``."""
    xi = np.asarray(xi, dtype=float)
    if np.any(~(xi >= 0)):
        raise ValueError("xi must be non-negative")
    # xi*log1p(1/xi) + log1p(xi) avoids cancellation for large xi; the
    # direct form is fine below 1 and survives subnormal xi
    small = np.minimum(xi, 1.0)
    big = np.maximum(xi, 1.0)
    direct = -xlogy(small, small) + (small + 1.0) * np.log1p(small)
    stable = big * np.log1p(1.0 / big) + np.log1p(big)
    return np.where(xi <= 1.0, direct, stable)


def noisy_or_log_bound(x, xi):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("noisy-OR transform requires x > 0")
    return np.asarray(xi, dtype=float) * x - noisy_or_conjugate(xi)


def noisy_or_bound(x, xi):
    """Upper bound ``exp(xi x - F(xi)) >= 1 - exp(-x)`` for ``x > 0``."""
    with np.errstate(over="ignore"):
        return np.exp(noisy_or_log_bound(x, xi))


def noisy_or_opt_xi(x):
    """``q/(1-q)`` with ``q = exp(-x)``, i.e. ``1/expm1(x)``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("noisy-OR transform requires x > 0")
    return 1.0 / np.expm1(x)


# -- log x = min_lambda (lambda x - log lambda - 1) -----------------------


def legendre_log(x, lam):
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(~(x > 0)) or np.any(~(lam > 0)):
        raise ValueError("legendre_log requires x > 0 and lambda > 0")
    return lam * x - np.log(lam) - 1.0


def legendre_opt_lambda(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("legendre_opt_lambda requires x > 0")
    return 1.0 / x


# -- 1 - exp(-x) = prod_k g(2^k x) ----------------------------------------


def noisy_or_expansion(x, n_terms: int = 16):
    """Truncated product ``prod_{k<N} g(2^k x)``.

    Computed in the linear domain so that ``x = 0`` gives ``0.5**N`` exactly.
    The truncation satisfies ``expansion >= 1 - exp(-x)``: the dropped tail
    factor ``1 - exp(-2^N x)`` is at most one.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    x = np.asarray(x, dtype=float)
    scales = 2.0 ** np.arange(n_terms)
    return np.prod(expit(np.multiply.outer(x, scales)), axis=-1)


def log_noisy_or_expansion(x, n_terms: int = 16):
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    x = np.asarray(x, dtype=float)
    scales = 2.0 ** np.arange(n_terms)
    return log_sigmoid(np.multiply.outer(x, scales)).sum(axis=-1)


# -- -log(1 + X) >= a (X - x)^2 + b (X - x) + c on [0, 1] -----------------


@dataclass(frozen=True)
class QuadCoeffs:
    a: float
    b: float
    c: float
    x: float

    def __call__(self, X):
        d = np.asarray(X, dtype=float) - self.x
        return self.a * d * d + self.b * d + self.c


def quad_curvature(x):
    """Largest ``a`` keeping the tangent-matched quadratic below ``-log(1+X)``.

    Equals ``(u/(1-u) + log1p(-u)) / (4 u^2)`` with ``u = (1-x)/2``; a short
    series takes over for small ``u`` where that difference cancels.
    """
    x = np.asarray(x, dtype=float)
    u = 0.5 * (1.0 - x)
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = (u / (1.0 - u) + np.log1p(-u)) / (4.0 * u * u)
    # sum_{m>=2} (m-1)/m u^(m-2) / 4
    series = np.zeros_like(u)
    for m in range(12, 1, -1):
        series = series * u + (m - 1) / m
    series = series / 4.0
    return np.where(u < 1e-3, series, direct)


def quad_coeffs(x: float) -> QuadCoeffs:
    if not 0.0 <= x < 1.0:
        raise ValueError(f"expansion point must lie in [0, 1), got {x!r}")
    c = -float(np.log1p(x))
    b = -1.0 / (1.0 + x)
    return QuadCoeffs(float(quad_curvature(x)), b, c, float(x))
