"""Closed-form quantities of a Dirichlet output and its uniform prior.

Functions operate on ``alpha`` of shape ``(K,)`` or ``(n, K)``; the class
axis is always last and reductions over it are returned per row. All
entropies are in nats.
"""

from __future__ import annotations

import numpy as np

from . import numerics
from .numerics import DomainError

__all__ = [
    "ALPHA_FLOOR",
    "check_alpha",
    "uniform_prior",
    "predictive_mean",
    "expected_nll",
    "expected_nll_grad",
    "kl_to_uniform",
    "kl_to_uniform_grad",
    "output_entropy",
    "differential_entropy",
]

ALPHA_FLOOR = 1e-8


# array-valued wrappers: the numerics functions return floats for 0-d input
def digamma(x):
    return np.asarray(numerics.digamma(x))


def trigamma(x):
    return np.asarray(numerics.trigamma(x))


def ln_gamma(x):
    return np.asarray(numerics.ln_gamma(x))


def ln_beta(a):
    return np.asarray(numerics.ln_beta(a))


def check_alpha(alpha) -> np.ndarray:
    """Validate concentration parameters and return them as a float array.

    Raises
    ------
    DomainError
        If the class axis has fewer than two entries, or any component is
        non-finite or below ``ALPHA_FLOOR``.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] < 2:
        raise DomainError(f"alpha must have shape (K,) or (n, K) with K >= 2, got {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < ALPHA_FLOOR):
        raise DomainError(f"alpha components must be finite and >= {ALPHA_FLOOR}")
    return a


def _labels(labels, a):
    k = a.shape[-1]
    y = np.asarray(labels)
    if y.shape != a.shape[:-1]:
        raise IndexError(f"label shape {y.shape} does not match alpha batch {a.shape[:-1]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise IndexError("labels must be integer class indices")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"label out of range [0, {k})")
    return y


def _pick(arr, y):
    if arr.ndim == 1:
        return arr[y]
    return np.take_along_axis(arr, y[:, None], axis=-1)[:, 0]


def _scalar(res):
    return float(res) if np.ndim(res) == 0 else res


def uniform_prior(k: int) -> np.ndarray:
    """The flat prior over the K-simplex, ``<1, ..., 1>``."""
    if int(k) != k or k < 2:
        raise DomainError("uniform prior needs k >= 2 classes")
    return np.ones(int(k))


def predictive_mean(alpha) -> np.ndarray:
    a = check_alpha(alpha)
    return a / np.sum(np.sort(a, axis=-1), axis=-1, keepdims=True)


def expected_nll(alpha, label):
    """Cross-entropy averaged over ``Dir(alpha)``: ``psi(a0) - psi(a_label)``."""
    a = check_alpha(alpha)
    y = _labels(label, a)
    return _scalar(digamma(np.sum(a, axis=-1)) - _pick(digamma(a), y))


def expected_nll_grad(alpha, label) -> np.ndarray:
    a = check_alpha(alpha)
    y = _labels(label, a)
    grad = np.broadcast_to(trigamma(np.sum(a, axis=-1, keepdims=True)), a.shape).copy()
    tri = trigamma(a)
    if a.ndim == 1:
        grad[y] -= tri[y]
    else:
        rows = np.arange(a.shape[0])
        grad[rows, y] -= tri[rows, y]
    return grad


def _kl_dirichlet(alpha, beta):
    """KL[Dir(alpha) || Dir(beta)] for matching shapes."""
    a0 = np.sum(alpha, axis=-1)
    return (
        ln_gamma(a0)
        - ln_gamma(np.sum(beta, axis=-1))
        - np.sum(ln_gamma(alpha), axis=-1)
        + np.sum(ln_gamma(beta), axis=-1)
        + np.sum((alpha - beta) * (digamma(alpha) - digamma(a0)[..., None]), axis=-1)
    )


def kl_to_uniform(alpha):
    """KL divergence from ``Dir(alpha)`` to the uniform simplex prior."""
    a = np.sort(check_alpha(alpha), axis=-1)
    k = a.shape[-1]
    a0 = np.sum(a, axis=-1)
    cross = np.sum((a - 1.0) * (digamma(a) - digamma(a0)[..., None]), axis=-1)
    res = -ln_beta(a) - ln_gamma(float(k)) + cross
    # exact zero at the prior; tiny negatives elsewhere are rounding
    return _scalar(np.maximum(res, 0.0))


def kl_to_uniform_grad(alpha) -> np.ndarray:
    a = check_alpha(alpha)
    k = a.shape[-1]
    a0 = np.sum(a, axis=-1, keepdims=True)
    return (a - 1.0) * trigamma(a) - (a0 - k) * trigamma(a0)


def output_entropy(alpha):
    """Shannon entropy of the predictive mean (total uncertainty)."""
    p = np.sort(predictive_mean(alpha), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return _scalar(np.sum(terms, axis=-1))


def differential_entropy(alpha):
    """Entropy of ``Dir(alpha)`` itself (distributional uncertainty)."""
    a = np.sort(check_alpha(alpha), axis=-1)
    k = a.shape[-1]
    a0 = np.sum(a, axis=-1)
    res = ln_beta(a) + (a0 - k) * digamma(a0) - np.sum((a - 1.0) * digamma(a), axis=-1)
    return _scalar(res)
