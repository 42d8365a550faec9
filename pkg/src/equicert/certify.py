"""Certification of probabilistic local equivalence.

Per point: evaluate the base output, draw Gaussian probes around the input,
count probes whose outputs are equivalent under the configured distance, take
a one-sided lower confidence bound on the equivalence probability, and
convert it to an L2 radius through the normal quantile. A bound at or below
one half yields ABSTAIN. Dataset-level scoring averages the radii with
ABSTAIN contributing zero.

All probe noise is keyed by (seed, point index, probe index), so outcomes do
not depend on batch size, evaluation order, or worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import EquivalenceSpec, MissingGroundTruthError, is_equivalent, metric_score
from .stats import (
    STREAM_SOUNDNESS,
    NoiseSpec,
    gaussian_perturb,
    lower_conf_bound,
    rng_stream,
    std_normal_quantile,
)

CERTIFIED = "CERTIFIED"
ABSTAIN = "ABSTAIN"

# probe indices are laid out as point_index * 2^32 + probe_index
_PROBE_STRIDE = 1 << 32

Evaluator = Callable[[np.ndarray], Sequence]


@dataclass(frozen=True)
class CertOutcome:
    """Result of certifying one point."""

    status: str
    radius: float | None
    p_lower: float
    count: int
    n: int
    sigma: float
    alpha: float

    def __post_init__(self):
        if self.status not in (CERTIFIED, ABSTAIN):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == CERTIFIED:
            if not (self.p_lower > 0.5):
                raise ValueError("certified outcome requires p_lower > 1/2")
            if self.radius is None or not (self.radius > 0.0):
                raise ValueError("certified outcome requires a positive radius")
        elif self.radius is not None:
            raise ValueError("abstain carries no radius")

    @property
    def radius_or_zero(self) -> float:
        return self.radius if self.radius is not None else 0.0


@dataclass(frozen=True)
class PointResult:
    """Outcome or recorded failure for one evaluation point."""

    point_id: int
    outcome: CertOutcome | None = None
    error: str | None = None


@dataclass(frozen=True)
class RobustnessCurve:
    radii_grid: tuple[float, ...]
    fraction_certified: tuple[float, ...]


def _as_outputs(result, batch_len: int) -> list:
    out = list(result)
    if len(out) != batch_len:
        raise ValueError(f"evaluator returned {len(out)} outputs for batch of {batch_len}")
    return out


def certify_probabilistic_equivalence(
    f: Evaluator,
    x0: np.ndarray,
    y=None,
    *,
    noise: NoiseSpec,
    n: int,
    alpha: float,
    spec: EquivalenceSpec,
    point_index: int = 0,
    batch_size: int = 32,
) -> CertOutcome:
    """Certify one point, returning a radius or ABSTAIN.

    The evaluator receives stacked batches of perturbed inputs and must
    return one metric-ready output per row. Supervised mode scores the base
    output against the ground truth once and reuses that score for every
    probe.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    if spec.mode == "supervised" and y is None:
        raise MissingGroundTruthError("supervised certification requires ground truth")
    x0 = np.asarray(x0, dtype=np.float64)

    y0 = _as_outputs(f(x0[None]), 1)[0]
    base_score = None
    if spec.mode == "supervised":
        base_score = metric_score(spec.metric, y0, y)

    count = 0
    base = point_index * _PROBE_STRIDE
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        probes = np.stack([gaussian_perturb(x0, noise, base + j) for j in range(start, stop)])
        outputs = _as_outputs(f(probes), stop - start)
        for out in outputs:
            if is_equivalent(spec, y0, out, ground_truth=y, base_score=base_score):
                count += 1

    p_lower = lower_conf_bound(count, n, alpha)
    common = dict(p_lower=p_lower, count=count, n=n, sigma=noise.sigma, alpha=alpha)
    if p_lower > 0.5:
        radius = noise.sigma * std_normal_quantile(p_lower)
        return CertOutcome(status=CERTIFIED, radius=radius, **common)
    return CertOutcome(status=ABSTAIN, radius=None, **common)


def certify_dataset(
    f: Evaluator,
    eval_set: Sequence[tuple],
    *,
    noise: NoiseSpec,
    n: int,
    alpha: float,
    spec: EquivalenceSpec,
    batch_size: int = 32,
    workers: int = 1,
    on_error: str = "raise",
) -> list[PointResult]:
    """Certify every (x, y-or-None) pair, merging results by point index.

    With on_error="record", evaluator failures are captured per point and the
    remaining points still run; "raise" propagates immediately.
    """
    if len(eval_set) == 0:
        raise ValueError("eval set must be nonempty")
    if on_error not in ("raise", "record"):
        raise ValueError(f"bad on_error {on_error!r}")

    def one(i: int) -> PointResult:
        x, y = eval_set[i]
        try:
            outcome = certify_probabilistic_equivalence(
                f, x, y, noise=noise, n=n, alpha=alpha, spec=spec,
                point_index=i, batch_size=batch_size)
            return PointResult(point_id=i, outcome=outcome)
        except Exception as exc:  # noqa: BLE001 - recorded per point by request
            if on_error == "raise":
                raise
            return PointResult(point_id=i, error=f"{type(exc).__name__}: {exc}")

    indices = range(len(eval_set))
    if workers <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, indices))
    return sorted(results, key=lambda r: r.point_id)


def robustness_score(
    f: Evaluator,
    eval_set: Sequence[tuple],
    *,
    noise: NoiseSpec,
    n: int,
    alpha: float,
    spec: EquivalenceSpec,
    batch_size: int = 32,
    workers: int = 1,
) -> float:
    """Mean certified radius over the evaluation set; ABSTAIN counts as 0."""
    results = certify_dataset(
        f, eval_set, noise=noise, n=n, alpha=alpha, spec=spec,
        batch_size=batch_size, workers=workers, on_error="raise")
    return score_from_results(results)


def score_from_results(results: Sequence[PointResult]) -> float:
    radii = [r.outcome.radius_or_zero for r in results if r.outcome is not None]
    if not radii:
        raise ValueError("no successful certifications to score")
    return float(np.mean(radii))


def robustness_curve(outcomes: Sequence[CertOutcome], grid: Sequence[float]) -> RobustnessCurve:
    """Fraction of points with a certified radius at least r, per grid r."""
    grid = [float(r) for r in grid]
    if not grid:
        raise ValueError("radius grid must be nonempty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("radius grid must be strictly increasing")
    total = len(outcomes)
    fractions = []
    for r in grid:
        hit = sum(1 for o in outcomes if o.status == CERTIFIED and o.radius >= r)
        fractions.append(hit / total if total else 0.0)
    return RobustnessCurve(radii_grid=tuple(grid), fraction_certified=tuple(fractions))


@dataclass(frozen=True)
class SoundnessProbe:
    distance: float
    estimate: float
    slack: float

    @property
    def ok(self) -> bool:
        return self.estimate >= 0.5 - self.slack


@dataclass(frozen=True)
class SoundnessReport:
    passed: bool
    probes: tuple[SoundnessProbe, ...] = field(default_factory=tuple)

    @property
    def worst_estimate(self) -> float:
        return min(p.estimate for p in self.probes)


def empirical_soundness_check(
    f: Evaluator,
    x0: np.ndarray,
    y,
    outcome: CertOutcome,
    *,
    noise: NoiseSpec,
    spec: EquivalenceSpec,
    directions: int = 20,
    probe_count: int = 1000,
    batch_size: int = 200,
) -> SoundnessReport:
    """Monte-Carlo falsification harness for a certified radius.

    Samples points strictly inside the certified ball, estimates the
    probability that their Gaussian neighbours stay equivalent to the base
    output, and checks every estimate clears one half minus three binomial
    standard errors. A failure falsifies the certificate; passing proves
    nothing, it just fails to falsify.
    """
    if outcome.status != CERTIFIED:
        raise ValueError("soundness check requires a certified outcome")
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = _as_outputs(f(x0[None]), 1)[0]
    base_score = None
    if spec.mode == "supervised":
        if y is None:
            raise MissingGroundTruthError("supervised soundness check requires ground truth")
        base_score = metric_score(spec.metric, y0, y)

    probes = []
    for d in range(directions):
        rng = rng_stream(noise.seed, STREAM_SOUNDNESS, d)
        direction = rng.normal(size=x0.shape)
        norm = float(np.sqrt((direction ** 2).sum()))
        if norm == 0.0:
            continue
        distance = float(rng.uniform(0.0, outcome.radius))
        x = x0 + direction / norm * distance

        hits = 0
        for start in range(0, probe_count, batch_size):
            stop = min(start + batch_size, probe_count)
            eps = rng.normal(0.0, noise.sigma, size=(stop - start,) + x0.shape)
            outs = _as_outputs(f(x[None] + eps), stop - start)
            for out in outs:
                if is_equivalent(spec, y0, out, ground_truth=y, base_score=base_score):
                    hits += 1
        estimate = hits / probe_count
        se = float(np.sqrt(estimate * (1.0 - estimate) / probe_count))
        probes.append(SoundnessProbe(distance=distance, estimate=estimate, slack=3.0 * se))

    return SoundnessReport(passed=all(p.ok for p in probes), probes=tuple(probes))
