"""Special functions and deterministic sampling.

Every function here accepts a scalar or an array. Scalars come back as
``float``; arrays come back elementwise with the same shape.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DomainError",
    "Rng",
    "ln_gamma",
    "digamma",
    "trigamma",
    "digamma_trigamma",
    "ln_beta",
    "sample_uniform",
    "sample_normal",
    "sample_gamma",
    "sample_dirichlet",
]


class DomainError(ValueError):
    """Raised when an argument lies outside a function's domain."""


# Lanczos approximation, g = 7, nine coefficients.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_2k / (2k) and B_2k for k = 1..9, used by the asymptotic expansions.
_BERNOULLI = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
)
_DIGAMMA_COEF = tuple(b / (2 * (k + 1)) for k, b in enumerate(_BERNOULLI))
_ASYMPTOTIC_MIN = 6.0


def _positive(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} requires finite x > 0")
    return arr


def _out(arr, like):
    if np.ndim(like) == 0:
        return float(arr)
    return arr


def _horner(coefs, y):
    acc = np.zeros_like(y)
    for c in reversed(coefs):
        acc = acc * y + c
    return acc


def _lanczos(x):
    z = x - 1.0
    a = np.full_like(z, _LANCZOS_COEF[0])
    for i, c in enumerate(_LANCZOS_COEF[1:], start=1):
        a = a + c / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)


def ln_gamma(x):
    """Natural log of the gamma function for ``x > 0``.

    Uses the Lanczos series for ``x >= 0.5`` and the reflection formula
    below that.
    """
    arr = _positive(x, "ln_gamma")
    small = arr < 0.5
    big = np.where(small, 1.0 - arr, arr)
    res = _lanczos(big)
    if np.any(small):
        refl = np.log(np.pi / np.abs(np.sin(np.pi * arr))) - res
        res = np.where(small, refl, res)
    return _out(res, x)


def _shift_up(arr):
    """Shift ``arr`` above the asymptotic threshold.

    Returns the shifted argument and the accumulated ``1/x`` and ``1/x**2``
    corrections.
    """
    z = arr.copy()
    inv = np.zeros_like(z)
    inv2 = np.zeros_like(z)
    while True:
        low = z < _ASYMPTOTIC_MIN
        if not np.any(low):
            return z, inv, inv2
        r = np.where(low, 1.0 / np.where(low, z, 1.0), 0.0)
        inv += r
        inv2 += r * r
        z = np.where(low, z + 1.0, z)


def digamma(x):
    """Derivative of ``ln_gamma``."""
    arr = _positive(x, "digamma")
    z, inv, _ = _shift_up(arr)
    y = 1.0 / (z * z)
    res = np.log(z) - 0.5 / z - y * _horner(_DIGAMMA_COEF, y)
    return _out(res - inv, x)


def trigamma(x):
    """Second derivative of ``ln_gamma``; always positive."""
    arr = _positive(x, "trigamma")
    z, _, inv2 = _shift_up(arr)
    y = 1.0 / (z * z)
    res = 1.0 / z + 0.5 * y + (y / z) * _horner(_BERNOULLI, y)
    return _out(res + inv2, x)


def digamma_trigamma(x):
    """Both derivatives of ``ln_gamma`` from a single shift of ``x``."""
    arr = _positive(x, "digamma")
    z, inv, inv2 = _shift_up(arr)
    y = 1.0 / (z * z)
    psi = np.log(z) - 0.5 / z - y * _horner(_DIGAMMA_COEF, y) - inv
    tri = 1.0 / z + 0.5 * y + (y / z) * _horner(_BERNOULLI, y) + inv2
    return _out(psi, x), _out(tri, x)


def ln_beta(alpha):
    """Log of the multivariate Beta function along the last axis.

    Terms are summed in ascending order of value, so any permutation of
    ``alpha`` gives a bit-identical result.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] < 2:
        raise DomainError("ln_beta requires at least two components")
    a = np.sort(_positive(a, "ln_beta"), axis=-1)
    res = np.sum(np.sort(ln_gamma(a), axis=-1), axis=-1) - ln_gamma(np.sum(a, axis=-1))
    return _out(res, res)


class Rng:
    """Seeded random stream backed by the PCG64 bit generator.

    Only the raw 64-bit output of the bit generator is used; conversion to
    floats and all distribution transforms are done here, so a given seed
    yields the same stream on every platform.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._bits = np.random.PCG64(seed)

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def spawn(self, index: int) -> "Rng":
        """Independent stream for worker ``index`` (seed + index)."""
        return Rng((self.seed + int(index)) % 2**64)

    def stream(self, key: int) -> "Rng":
        """Named sub-stream, decorrelated from ``spawn`` neighbours."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(seq.generate_state(1, np.uint64)[0]))

    def _unit(self, n):
        raw = self._bits.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        lo_a = np.asarray(lo, dtype=np.float64)
        hi_a = np.asarray(hi, dtype=np.float64)
        if not (np.all(np.isfinite(lo_a)) and np.all(np.isfinite(hi_a))) or np.any(hi_a < lo_a):
            raise DomainError("uniform requires finite lo <= hi")
        shape = np.broadcast_shapes(lo_a.shape, hi_a.shape) if size is None else _shape(size)
        n = int(np.prod(shape))
        u = self._unit(n).reshape(shape)
        out = lo_a + (hi_a - lo_a) * u
        # lo + (hi - lo) * u can round up to hi
        out = np.where((out >= hi_a) & (hi_a > lo_a), np.nextafter(hi_a, lo_a), out)
        return float(out) if size is None and out.ndim == 0 else out

    def normal(self, mean=0.0, std=1.0, size=None):
        mean_a = np.asarray(mean, dtype=np.float64)
        std_a = np.asarray(std, dtype=np.float64)
        if not (np.all(np.isfinite(mean_a)) and np.all(np.isfinite(std_a))) or np.any(std_a < 0):
            raise DomainError("normal requires finite mean and std >= 0")
        shape = np.broadcast_shapes(mean_a.shape, std_a.shape) if size is None else _shape(size)
        n = int(np.prod(shape))
        z = self._standard_normal(n).reshape(shape)
        out = mean_a + std_a * z
        return float(out) if size is None and out.ndim == 0 else out

    def _standard_normal(self, n):
        # Box-Muller on pairs; both branches are used.
        m = (n + 1) // 2
        u = self._unit(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def gamma(self, shape, size=None):
        """Unit-scale gamma draws via Marsaglia-Tsang."""
        k = np.asarray(shape, dtype=np.float64)
        if not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise DomainError("gamma requires finite shape > 0")
        out_shape = k.shape if size is None else _shape(size)
        a = np.broadcast_to(k, out_shape).ravel()
        boost = a < 1.0
        d = np.where(boost, a + 1.0, a) - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(a.size)
        pending = np.arange(a.size)
        while pending.size:
            x = self._standard_normal(pending.size)
            u = self._unit(pending.size)
            dp, cp = d[pending], c[pending]
            v = (1.0 + cp * x) ** 3
            pos = v > 0.0
            with np.errstate(divide="ignore"):
                logv = np.log(np.where(pos, v, 1.0))
                accept = pos & (np.log(u) < 0.5 * x * x + dp - dp * v + dp * logv)
            out[pending[accept]] = (dp * v)[accept]
            pending = pending[~accept]
        if np.any(boost):
            idx = np.flatnonzero(boost)
            u = 1.0 - self._unit(idx.size)
            out[idx] *= u ** (1.0 / a[idx])
        out = out.reshape(out_shape)
        return float(out) if size is None and out.ndim == 0 else out

    def dirichlet(self, alpha, size=None):
        a = np.asarray(alpha, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise DomainError("dirichlet requires a 1-d alpha with K >= 2")
        lead = () if size is None else _shape(size)
        g = self.gamma(np.broadcast_to(a, lead + a.shape))
        g = np.asarray(g)
        return g / np.sum(g, axis=-1, keepdims=True)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of ``range(n)`` (stable argsort of uniforms)."""
        return np.argsort(self._unit(n), kind="stable")


def _shape(size):
    return (int(size),) if np.ndim(size) == 0 else tuple(int(s) for s in size)


def sample_uniform(rng: Rng, lo: float, hi: float, size=None):
    return rng.uniform(lo, hi, size)


def sample_normal(rng: Rng, mean: float, std: float, size=None):
    return rng.normal(mean, std, size)


def sample_gamma(rng: Rng, shape: float, size=None):
    return rng.gamma(shape, size)


def sample_dirichlet(rng: Rng, alpha, size=None):
    return rng.dirichlet(alpha, size)
