import numpy as np
import pytest
from scipy import stats as sps

from equicert.certify import (
    ABSTAIN,
    CERTIFIED,
    CertOutcome,
    PointResult,
    certify_dataset,
    certify_probabilistic_equivalence,
    empirical_soundness_check,
    robustness_curve,
    robustness_score,
    score_from_results,
)
from equicert.metrics import EquivalenceSpec, MissingGroundTruthError
from equicert.stats import NoiseSpec, gaussian_perturb, lower_conf_bound, std_normal_quantile

MAX_RADIUS_160 = 0.20846809812161711  # 0.1 * quantile(0.05 ** (1/160))

ACC = EquivalenceSpec(metric="accuracy", threshold=0.5)


def constant_evaluator(batch):
    return [7] * len(batch)


def test_constant_function_max_radius():
    out = certify_probabilistic_equivalence(
        constant_evaluator, np.zeros(4), noise=NoiseSpec(sigma=0.1, seed=1),
        n=160, alpha=0.05, spec=ACC)
    assert out.status == CERTIFIED
    assert out.count == 160
    assert out.radius == pytest.approx(MAX_RADIUS_160, abs=1e-6)


def test_boundary_function_abstains():
    def sign_evaluator(batch):
        return [int(row.sum() >= 0) for row in batch]

    out = certify_probabilistic_equivalence(
        sign_evaluator, np.zeros(8), noise=NoiseSpec(sigma=0.5, seed=3),
        n=160, alpha=0.05, spec=ACC)
    assert out.status == ABSTAIN
    assert out.radius is None
    assert out.p_lower <= 0.5


def test_n_equal_one_abstains():
    out = certify_probabilistic_equivalence(
        constant_evaluator, np.zeros(2), noise=NoiseSpec(sigma=0.1, seed=1),
        n=1, alpha=0.05, spec=ACC)
    assert out.status == ABSTAIN
    assert out.p_lower == pytest.approx(0.05)


def test_batch_size_does_not_change_outcome():
    def flaky_boundary(batch):
        return [int(row[0] > 0.05) for row in batch]

    kw = dict(noise=NoiseSpec(sigma=0.1, seed=9), n=64, alpha=0.05, spec=ACC)
    a = certify_probabilistic_equivalence(flaky_boundary, np.zeros(3), batch_size=7, **kw)
    b = certify_probabilistic_equivalence(flaky_boundary, np.zeros(3), batch_size=64, **kw)
    assert a == b


def test_radius_monotone_in_count():
    radii = []
    for k in range(81, 161):
        p = lower_conf_bound(k, 160, 0.05)
        radii.append(0.1 * std_normal_quantile(p) if p > 0.5 else 0.0)
    assert all(b >= a for a, b in zip(radii, radii[1:]))


def test_radius_scales_with_sigma():
    out1 = certify_probabilistic_equivalence(
        constant_evaluator, np.zeros(2), noise=NoiseSpec(sigma=0.1, seed=1),
        n=100, alpha=0.05, spec=ACC)
    out2 = certify_probabilistic_equivalence(
        constant_evaluator, np.zeros(2), noise=NoiseSpec(sigma=0.25, seed=1),
        n=100, alpha=0.05, spec=ACC)
    assert out2.radius == pytest.approx(2.5 * out1.radius, rel=1e-12)


def test_supervised_requires_ground_truth():
    spec = EquivalenceSpec(metric="accuracy", threshold=0.5, mode="supervised")
    with pytest.raises(MissingGroundTruthError):
        certify_probabilistic_equivalence(
            constant_evaluator, np.zeros(2), noise=NoiseSpec(sigma=0.1, seed=1),
            n=8, alpha=0.05, spec=spec)


def test_parameter_validation():
    with pytest.raises(ValueError):
        certify_probabilistic_equivalence(
            constant_evaluator, np.zeros(2), noise=NoiseSpec(sigma=0.1, seed=1),
            n=0, alpha=0.05, spec=ACC)
    with pytest.raises(ValueError):
        certify_probabilistic_equivalence(
            constant_evaluator, np.zeros(2), noise=NoiseSpec(sigma=0.1, seed=1),
            n=10, alpha=1.5, spec=ACC)


def test_evaluator_failure_propagates():
    def broken(batch):
        raise RuntimeError("child died")

    with pytest.raises(RuntimeError):
        certify_probabilistic_equivalence(
            broken, np.zeros(2), noise=NoiseSpec(sigma=0.1, seed=1),
            n=8, alpha=0.05, spec=ACC)


def test_certify_dataset_records_errors():
    calls = {"n": 0}

    def sometimes_broken(batch):
        calls["n"] += 1
        if batch[0, 0] > 0.5:
            raise RuntimeError("boom")
        return [0] * len(batch)

    eval_set = [(np.zeros(2), None), (np.ones(2), None), (np.zeros(2), None)]
    results = certify_dataset(
        sometimes_broken, eval_set, noise=NoiseSpec(sigma=0.01, seed=4),
        n=8, alpha=0.05, spec=ACC, on_error="record")
    assert results[0].outcome is not None
    assert results[1].error is not None and "boom" in results[1].error
    assert results[2].outcome is not None


# ---------------------------------------------------------------------------
# robustness score and curve arithmetic
# ---------------------------------------------------------------------------

def test_score_all_abstain_is_zero():
    def boundary(batch):
        return [int(row.sum() >= 0) for row in batch]

    eval_set = [(np.zeros(8), None) for _ in range(3)]
    score = robustness_score(
        boundary, eval_set, noise=NoiseSpec(sigma=1.0, seed=5),
        n=40, alpha=0.05, spec=ACC)
    assert score == 0.0


def test_score_constant_function():
    eval_set = [(np.zeros(4), None) for _ in range(5)]
    score = robustness_score(
        constant_evaluator, eval_set, noise=NoiseSpec(sigma=0.1, seed=6),
        n=160, alpha=0.05, spec=ACC)
    assert score == pytest.approx(MAX_RADIUS_160, abs=1e-6)


def test_score_mixed_half_certified():
    rho = 0.125
    cert = CertOutcome(CERTIFIED, rho, 0.9, 150, 160, 0.1, 0.05)
    abst = CertOutcome(ABSTAIN, None, 0.4, 70, 160, 0.1, 0.05)
    results = [PointResult(0, cert), PointResult(1, abst),
               PointResult(2, cert), PointResult(3, abst)]
    assert score_from_results(results) == pytest.approx(rho / 2)


def test_empty_eval_set_rejected():
    with pytest.raises(ValueError):
        certify_dataset(constant_evaluator, [], noise=NoiseSpec(sigma=0.1, seed=1),
                        n=8, alpha=0.05, spec=ACC)


def test_curve_counting():
    outcomes = [
        CertOutcome(CERTIFIED, 0.1, 0.8, 150, 160, 0.1, 0.05),
        CertOutcome(CERTIFIED, 0.2, 0.9, 158, 160, 0.1, 0.05),
        CertOutcome(ABSTAIN, None, 0.3, 60, 160, 0.1, 0.05),
    ]
    curve = robustness_curve(outcomes, [0.05, 0.15])
    assert curve.fraction_certified == (pytest.approx(2 / 3), pytest.approx(1 / 3))
    # r = 0: abstain does not count even though its radius-for-scoring is 0
    assert robustness_curve(outcomes, [0.0]).fraction_certified[0] == pytest.approx(2 / 3)
    # beyond the largest radius
    assert robustness_curve(outcomes, [0.5]).fraction_certified[0] == 0.0
    assert robustness_curve(outcomes, [0.05, 0.15]).radii_grid == (0.05, 0.15)


def test_curve_grid_validation():
    outcomes = [CertOutcome(ABSTAIN, None, 0.3, 60, 160, 0.1, 0.05)]
    with pytest.raises(ValueError):
        robustness_curve(outcomes, [])
    with pytest.raises(ValueError):
        robustness_curve(outcomes, [0.2, 0.1])


def test_curve_nonincreasing_property():
    rng = np.random.default_rng(0)
    outcomes = []
    for _ in range(30):
        k = int(rng.integers(0, 161))
        p = lower_conf_bound(k, 160, 0.05)
        if p > 0.5:
            outcomes.append(CertOutcome(CERTIFIED, 0.1 * std_normal_quantile(p), p, k, 160, 0.1, 0.05))
        else:
            outcomes.append(CertOutcome(ABSTAIN, None, p, k, 160, 0.1, 0.05))
    curve = robustness_curve(outcomes, list(np.linspace(0, 0.25, 26)))
    fr = curve.fraction_certified
    assert all(b <= a for a, b in zip(fr, fr[1:]))
    assert all(0.0 <= v <= 1.0 for v in fr)


def test_outcome_invariants_enforced():
    with pytest.raises(ValueError):
        CertOutcome(CERTIFIED, None, 0.9, 150, 160, 0.1, 0.05)
    with pytest.raises(ValueError):
        CertOutcome(CERTIFIED, 0.1, 0.4, 150, 160, 0.1, 0.05)
    with pytest.raises(ValueError):
        CertOutcome(ABSTAIN, 0.1, 0.4, 50, 160, 0.1, 0.05)


# ---------------------------------------------------------------------------
# order, parallelism, and shared-probe invariances
# ---------------------------------------------------------------------------

def _threshold_evaluator(theta):
    def f(batch):
        return [int(row[0] < theta) for row in batch]
    return f


def test_workers_do_not_change_results():
    eval_set = [(np.array([0.02 * i]), None) for i in range(8)]
    kw = dict(noise=NoiseSpec(sigma=0.1, seed=11), n=60, alpha=0.05, spec=ACC)
    seq = certify_dataset(_threshold_evaluator(0.08), eval_set, workers=1, **kw)
    par = certify_dataset(_threshold_evaluator(0.08), eval_set, workers=3, **kw)
    assert seq == par


def test_classification_reduction_and_cohen_reference():
    """Accuracy-metric certification is t-independent and matches a
    single-class smoothing certifier run on the same probes."""
    rng = np.random.default_rng(42)
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=3)

    def classifier(batch):
        return [int(np.argmax(row @ w + b)) for row in batch]

    noise = NoiseSpec(sigma=0.25, seed=17)
    n, alpha = 60, 0.05
    points = [rng.normal(size=2) for _ in range(12)]

    outcomes_by_t = {}
    for t in (0.1, 0.5, 0.9):
        spec = EquivalenceSpec(metric="accuracy", threshold=t)
        outcomes_by_t[t] = [
            certify_probabilistic_equivalence(
                classifier, x, noise=noise, n=n, alpha=alpha, spec=spec, point_index=i)
            for i, x in enumerate(points)
        ]
    assert outcomes_by_t[0.1] == outcomes_by_t[0.5] == outcomes_by_t[0.9]

    # reference: count probes predicting the base class, Clopper-Pearson via
    # scipy's beta quantile, radius through scipy's normal quantile
    for i, x in enumerate(points):
        y0 = classifier(x[None])[0]
        k = 0
        for j in range(n):
            probe = gaussian_perturb(x, noise, i * (1 << 32) + j)
            k += int(classifier(probe[None])[0] == y0)
        p = sps.beta.ppf(alpha, k, n - k + 1) if k > 0 else 0.0
        got = outcomes_by_t[0.5][i]
        assert got.count == k
        if p > 0.5:
            assert got.status == CERTIFIED
            assert got.radius == pytest.approx(noise.sigma * sps.norm.ppf(p), abs=1e-7)
        else:
            assert got.status == ABSTAIN


# ---------------------------------------------------------------------------
# empirical soundness harness
# ---------------------------------------------------------------------------

def test_soundness_constant_function():
    out = certify_probabilistic_equivalence(
        constant_evaluator, np.zeros(3), noise=NoiseSpec(sigma=0.1, seed=21),
        n=160, alpha=0.05, spec=ACC)
    report = empirical_soundness_check(
        constant_evaluator, np.zeros(3), None, out,
        noise=NoiseSpec(sigma=0.1, seed=21), spec=ACC,
        directions=5, probe_count=200)
    assert report.passed
    assert report.worst_estimate == 1.0


def test_soundness_threshold_function_inside_radius():
    """1-D step function: the smoothed equivalence probability is an exact
    normal CDF, so the certificate must survive probing inside its radius."""
    theta, sigma = 0.12, 0.1
    f = _threshold_evaluator(theta)
    noise = NoiseSpec(sigma=sigma, seed=23)
    out = certify_probabilistic_equivalence(
        f, np.zeros(1), noise=noise, n=160, alpha=0.05, spec=ACC)
    assert out.status == CERTIFIED
    # the certified radius cannot reach the idealized one
    assert out.radius < theta
    report = empirical_soundness_check(
        f, np.zeros(1), None, out, noise=noise, spec=ACC,
        directions=20, probe_count=1000)
    assert report.passed


def test_soundness_requires_certified():
    abst = CertOutcome(ABSTAIN, None, 0.4, 70, 160, 0.1, 0.05)
    with pytest.raises(ValueError):
        empirical_soundness_check(
            constant_evaluator, np.zeros(1), None, abst,
            noise=NoiseSpec(sigma=0.1, seed=1), spec=ACC)


def test_threshold_function_analytic_half_at_idealized_radius():
    """At the idealized radius sigma * quantile(smoothed value), the analytic
    equivalence probability returns exactly one half."""
    from equicert.stats import std_normal_cdf

    theta, sigma, x0 = 0.12, 0.1, 0.0
    p_true = std_normal_cdf((theta - x0) / sigma)
    r_ideal = sigma * std_normal_quantile(p_true)
    p_at_r = std_normal_cdf((theta - (x0 + r_ideal)) / sigma)
    assert abs(float(p_at_r) - 0.5) <= 1e-6
