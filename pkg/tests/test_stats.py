import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equicert.stats import (
    NoiseSpec,
    gaussian_perturb,
    lower_conf_bound,
    rng_stream,
    std_normal_cdf,
    std_normal_quantile,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def binom_tail(n, k, p):
    """P(Binomial(n, p) >= k) by direct summation."""
    if k <= 0:
        return 1.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    return sum(math.comb(n, i) * p**i * (1.0 - p)**(n - i) for i in range(k, n + 1))


def lcb_bisect_oracle(k, n, alpha):
    """Largest p with P(Bin(n,p) >= k) <= alpha, bisected on the tail sum."""
    if k == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if binom_tail(n, k, mid) <= alpha:
            lo = mid
        else:
            hi = mid
    return lo


def phi_series_oracle(x):
    """Normal CDF from the erf Taylor series, partial sums in exact rationals.

    Only valid where x*x/2 is exactly representable; the tests use such points.
    """
    z2 = Fraction(x * x) / 2  # (x/sqrt2)^2 as an exact rational
    s = Fraction(0)
    term = Fraction(1)  # z^(2n)/n! with z factored out
    n = 0
    while True:
        add = term / (2 * n + 1)
        s += add
        n += 1
        term = -term * z2 / n
        if abs(add) < Fraction(1, 10**40) and n > 5:
            break
    zf = x / math.sqrt(2.0)
    erf = 2.0 / math.sqrt(math.pi) * zf * float(s)
    return 0.5 * (1.0 + erf)


# ---------------------------------------------------------------------------
# lower_conf_bound
# ---------------------------------------------------------------------------

def test_lcb_zero_successes():
    assert lower_conf_bound(0, 160, 0.05) == 0.0


def test_lcb_all_successes_closed_form():
    got = lower_conf_bound(160, 160, 0.05)
    assert got == pytest.approx(0.05 ** (1 / 160), abs=1e-12)
    assert got == pytest.approx(0.9814508659224962, abs=1e-10)
    # cross-check against the tail-sum bisection oracle
    assert got == pytest.approx(lcb_bisect_oracle(160, 160, 0.05), abs=1e-10)


def test_lcb_three_of_ten():
    # frozen from the tail-sum bisection oracle at tolerance 1e-10
    assert lower_conf_bound(3, 10, 0.05) == pytest.approx(0.0872644339141503, abs=1e-10)


def test_lcb_matches_oracle_small_n():
    for n in (1, 2, 5, 9, 17, 30):
        for alpha in (0.01, 0.05, 0.1):
            for k in range(0, n + 1):
                want = lcb_bisect_oracle(k, n, alpha)
                got = lower_conf_bound(k, n, alpha)
                assert got == pytest.approx(want, abs=1e-9), (k, n, alpha)


def test_lcb_never_exceeds_mle():
    for n in (4, 10, 160):
        for k in range(1, n + 1):
            assert lower_conf_bound(k, n, 0.05) <= k / n + 1e-12


@given(n=st.integers(1, 60), alpha=st.sampled_from([0.01, 0.05, 0.2]))
@settings(max_examples=40, deadline=None)
def test_lcb_monotone_in_k(n, alpha):
    vals = [lower_conf_bound(k, n, alpha) for k in range(n + 1)]
    for a, b in zip(vals, vals[1:]):
        assert b >= a - 1e-12


def test_lcb_rejects_bad_params():
    with pytest.raises(ValueError):
        lower_conf_bound(-1, 10, 0.05)
    with pytest.raises(ValueError):
        lower_conf_bound(11, 10, 0.05)
    with pytest.raises(ValueError):
        lower_conf_bound(3, 0, 0.05)
    with pytest.raises(ValueError):
        lower_conf_bound(3, 10, 0.0)
    with pytest.raises(ValueError):
        lower_conf_bound(3, 10, 1.0)


# ---------------------------------------------------------------------------
# std_normal_cdf / std_normal_quantile
# ---------------------------------------------------------------------------

def test_cdf_at_zero():
    assert std_normal_cdf(0.0) == 0.5


def test_cdf_against_series_oracle():
    for x in (0.5, 1.0, 2.0, 2.0845, -1.5):
        assert std_normal_cdf(x) == pytest.approx(phi_series_oracle(x), abs=1e-8)


def test_cdf_far_tail():
    # 0.5 * erfc(6/sqrt2); series oracle loses relative precision here, so the
    # expected value is frozen from a 40-digit computation
    assert std_normal_cdf(-6.0) == pytest.approx(9.86587645037698e-10, rel=1e-9)


def test_cdf_symmetry():
    for x in (0.1, 0.7, 1.9, 3.5, 5.0):
        assert std_normal_cdf(-x) == pytest.approx(1.0 - std_normal_cdf(x), abs=1e-14)


def test_quantile_median():
    assert std_normal_quantile(0.5) == pytest.approx(0.0, abs=1e-14)


def test_quantile_known_point():
    # bisection on the CDF puts Phi^-1(0.981447) at 2.0845958667046186
    assert std_normal_quantile(0.981447) == pytest.approx(2.0845958667046186, abs=1e-9)


def test_quantile_roundtrip_grid():
    for x in np.arange(-6.0, 6.0 + 1e-9, 1e-3):
        p = std_normal_cdf(x)
        assert abs(std_normal_quantile(p) - x) <= 1e-10


def test_quantile_strictly_increasing():
    ps = np.linspace(0.001, 0.999, 199)
    qs = [std_normal_quantile(p) for p in ps]
    assert all(b > a for a, b in zip(qs, qs[1:]))


def test_quantile_domain_errors():
    for p in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(ValueError):
            std_normal_quantile(p)


def test_max_radius_composition():
    # sigma * Phi^-1(alpha^(1/n)) at the certification defaults
    p = lower_conf_bound(160, 160, 0.05)
    radius = 0.1 * std_normal_quantile(p)
    assert radius == pytest.approx(0.20846809812161711, abs=1e-6)


# ---------------------------------------------------------------------------
# gaussian_perturb
# ---------------------------------------------------------------------------

def test_perturb_sigma_limit():
    x = np.linspace(-1.0, 1.0, 64).reshape(8, 8) + 0.5
    out = gaussian_perturb(x, NoiseSpec(sigma=1e-300, seed=1), index=0)
    assert np.array_equal(out, x)


def test_perturb_deterministic():
    x = np.zeros((3, 4, 5))
    spec = NoiseSpec(sigma=0.25, seed=7)
    a = gaussian_perturb(x, spec, index=3)
    b = gaussian_perturb(x, spec, index=3)
    assert np.array_equal(a, b)


def test_perturb_index_independent_of_order():
    x = np.zeros(16)
    spec = NoiseSpec(sigma=1.0, seed=42)
    forward = [gaussian_perturb(x, spec, index=i).copy() for i in range(5)]
    backward = [gaussian_perturb(x, spec, index=i).copy() for i in reversed(range(5))]
    for i in range(5):
        assert np.array_equal(forward[i], backward[4 - i])


def test_perturb_distinct_indices_differ():
    x = np.zeros(32)
    spec = NoiseSpec(sigma=1.0, seed=0)
    a = gaussian_perturb(x, spec, index=0)
    b = gaussian_perturb(x, spec, index=1)
    assert not np.array_equal(a, b)


def test_perturb_empirical_variance():
    spec = NoiseSpec(sigma=0.3, seed=11)
    draws = gaussian_perturb(np.zeros(100_000), spec, index=0)
    assert draws.var() == pytest.approx(0.3**2, rel=0.03)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(sigma=0.0)
    with pytest.raises(ValueError):
        NoiseSpec(sigma=-1.0)


def test_rng_stream_isolation():
    a = rng_stream(1, 2, 0).normal(size=8)
    b = rng_stream(1, 3, 0).normal(size=8)
    c = rng_stream(2, 2, 0).normal(size=8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
