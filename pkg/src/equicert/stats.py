"""Exact statistical primitives for certification.

Three ingredients: a one-sided Clopper-Pearson lower confidence bound for a
binomial proportion, the standard normal CDF and its inverse at full double
precision, and counter-based Gaussian perturbation sampling that is
reproducible independent of call order or parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

__all__ = [
    "ConfidenceParams",
    "NoiseSpec",
    "lower_conf_bound",
    "std_normal_cdf",
    "std_normal_quantile",
    "gaussian_perturb",
    "rng_stream",
    "STREAM_PROBES",
    "STREAM_DATA",
    "STREAM_INIT",
    "STREAM_SHUFFLE",
    "STREAM_FBF",
    "STREAM_TRADES",
    "STREAM_ATTACK",
    "STREAM_EVAL_ATTACK",
    "STREAM_SOUNDNESS",
]

# Stream ids partition the counter-based RNG keyspace so that every consumer
# of randomness in the toolkit draws from a disjoint, individually seeded
# stream. Adding a stream never perturbs existing ones.
STREAM_PROBES = 1
STREAM_DATA = 2
STREAM_INIT = 3
STREAM_SHUFFLE = 4
STREAM_FBF = 5
STREAM_TRADES = 6
STREAM_ATTACK = 7
STREAM_EVAL_ATTACK = 8
STREAM_SOUNDNESS = 9


@dataclass(frozen=True)
class ConfidenceParams:
    """Parameters of a one-sided binomial confidence statement."""

    alpha: float
    n: int
    k: int

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not (0 <= self.k <= self.n):
            raise ValueError(f"k must be in [0, n], got k={self.k}, n={self.n}")


@dataclass(frozen=True)
class NoiseSpec:
    """Isotropic Gaussian noise: standard deviation and reproducibility seed."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def _log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(
        a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    )
    # use the symmetry that keeps the continued fraction well conditioned
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def lower_conf_bound(k: int, n: int, alpha: float) -> float:
    """One-sided Clopper-Pearson lower bound on a binomial success probability.

    Returns the largest p such that P(Binomial(n, p) >= k) <= alpha, which is
    the alpha-quantile of Beta(k, n - k + 1). Solved by bisection on the
    regularized incomplete beta to a width of 1e-12. k = 0 gives 0 exactly
    and k = n uses the closed form alpha ** (1/n).
    """
    ConfidenceParams(alpha=alpha, n=n, k=k)
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    a = float(k)
    b = float(n - k + 1)
    # I_p(k, n-k+1) = P(Bin(n,p) >= k) is increasing in p; find tail == alpha
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if _reg_inc_beta(a, b, mid) <= alpha:
            lo = mid
        else:
            hi = mid
    return lo


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def std_normal_cdf(x: float) -> np.longdouble:
    """Standard normal CDF via the complementary error function.

    The smaller tail is always evaluated first, at full relative precision,
    and results above one half are returned as 1 minus that tail in extended
    precision. A plain double cannot hold the upper tail to better than about
    1e-16 absolute, which would cap the quantile round-trip near x = 6 at
    roughly 1e-8; the extended-precision complement keeps it below 1e-11.
    """
    t = 0.5 * math.erfc(abs(x) / _SQRT2)
    if x <= 0:
        return np.longdouble(t)
    return np.longdouble(1.0) - np.longdouble(t)


def _std_normal_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _quantile_seed(p: float) -> float:
    """Acklam's rational approximation to the normal quantile (~1e-9)."""
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if p > 1.0 - plow:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def _lower_quantile(q: float) -> float:
    """Quantile for q in (0, 0.5]: the x <= 0 with Phi(x) = q."""
    x = _quantile_seed(q)
    for _ in range(6):
        err = 0.5 * math.erfc(-x / _SQRT2) - q
        pdf = _std_normal_pdf(x)
        if pdf == 0.0:
            break
        step = err / pdf
        x -= step
        if abs(step) < 1e-15 * max(1.0, abs(x)):
            break
    return x


def std_normal_quantile(p: float) -> float:
    """Inverse of std_normal_cdf, Newton-refined to full double precision.

    Accepts plain or extended-precision probabilities; values above one half
    are folded onto the lower tail through an exact complement so no tail
    precision is lost. Raises ValueError outside the open interval (0, 1).
    """
    pl = np.longdouble(p)
    if not (np.longdouble(0.0) < pl < np.longdouble(1.0)):
        raise ValueError(f"p must be in (0,1), got {p}")
    if pl == np.longdouble(0.5):
        return 0.0
    if pl > 0.5:
        # exact in extended precision for p in [0.5, 1]
        return -_lower_quantile(float(np.longdouble(1.0) - pl))
    return _lower_quantile(float(pl))


def rng_stream(seed: int, stream: int, index: int = 0) -> Generator:
    """Counter-based generator keyed by (seed, stream, index).

    Philox places the key at (seed, stream) and the draw counter at the top
    word, so any (seed, stream, index) triple yields the same values no
    matter how many other streams were consumed, in which order, or on how
    many threads.
    """
    if index < 0:
        raise ValueError("index must be nonnegative")
    bg = Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF],
                counter=[0, 0, 0, index & 0xFFFFFFFFFFFFFFFF])
    return Generator(bg)


def gaussian_perturb(x: np.ndarray, spec: NoiseSpec, index: int = 0) -> np.ndarray:
    """Return x + eps with eps ~ N(0, sigma^2) i.i.d. per element.

    The draw is fully determined by (spec.seed, index); the same pair gives a
    bit-identical tensor regardless of call order or thread count.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = rng_stream(spec.seed, STREAM_PROBES, index)
    return x + rng.normal(0.0, spec.sigma, size=x.shape)
