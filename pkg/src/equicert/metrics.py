"""Output similarity scores and the distances they induce.

A score M maps a pair of model outputs (or an output and a ground truth) to
[0, 1]. Two distances are derived from it: the unsupervised form
1 - M(out, out') comparing outputs directly, and the supervised form
1 - M(out', gt) / M(out, gt) measuring relative degradation against a label.
The equivalence predicate thresholds either distance strictly below t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRICS = ("accuracy", "f_measure", "sbd")
MODES = ("unsupervised", "supervised")
RATIO_ORDERS = ("probe_over_base", "base_over_probe")


class ShapeMismatchError(ValueError):
    pass


class MissingGroundTruthError(ValueError):
    pass


@dataclass(frozen=True)
class EquivalenceSpec:
    """Which score to use, the threshold t, and whether labels are consulted.

    supervised_ratio selects which score sits in the numerator of the
    relative distance; "probe_over_base" is the default, "base_over_probe"
    is the alternate ordering kept for comparison runs.
    """

    metric: str
    threshold: float
    mode: str = "unsupervised"
    supervised_ratio: str = "probe_over_base"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.supervised_ratio not in RATIO_ORDERS:
            raise ValueError(f"unknown ratio order {self.supervised_ratio!r}")


def accuracy_metric(y1, y2) -> float:
    """1 if the two labels are identical, else 0."""
    if isinstance(y1, np.ndarray) or isinstance(y2, np.ndarray):
        return 1.0 if np.array_equal(np.asarray(y1), np.asarray(y2)) else 0.0
    return 1.0 if y1 == y2 else 0.0


def f_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Harmonic mean of precision and recall of the positive class.

    Zero by convention when precision + recall is zero.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"shapes {pred.shape} vs {gt.shape}")
    tp = float(np.logical_and(pred, gt).sum())
    npred = float(pred.sum())
    ngt = float(gt.sum())
    precision = tp / npred if npred > 0 else 0.0
    recall = tp / ngt if ngt > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; two empty masks agree perfectly."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes {a.shape} vs {b.shape}")
    sa = float(a.sum())
    sb = float(b.sum())
    if sa + sb == 0.0:
        return 1.0
    inter = float(np.logical_and(a, b).sum())
    return 2.0 * inter / (sa + sb)


def _best_dice_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Dice between every region of a and every region of b."""
    _, inv_a = np.unique(a, return_inverse=True)
    _, inv_b = np.unique(b, return_inverse=True)
    na = int(inv_a.max()) + 1
    nb = int(inv_b.max()) + 1
    joint = inv_a.ravel() * nb + inv_b.ravel()
    overlap = np.bincount(joint, minlength=na * nb).reshape(na, nb).astype(np.float64)
    sizes_a = overlap.sum(axis=1)
    sizes_b = overlap.sum(axis=0)
    return 2.0 * overlap / (sizes_a[:, None] + sizes_b[None, :])


def symmetric_best_dice(a: np.ndarray, b: np.ndarray) -> float:
    """min over both directions of the mean best Dice between instance regions.

    Every region id present in a grid counts as a region, background (id 0)
    included; this is what drives the score toward 1/4 when a prediction
    collapses the whole image into one region against a 3-lane ground truth.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes {a.shape} vs {b.shape}")
    d = _best_dice_matrix(a, b)
    bd_ab = float(d.max(axis=1).mean())
    bd_ba = float(d.max(axis=0).mean())
    return min(bd_ab, bd_ba)


def induced_distance(m_score: float) -> float:
    """Distance induced by a similarity score: 1 - M."""
    return 1.0 - m_score


def relative_distance(m_prime: float, m_base: float) -> float:
    """Label-relative distance 1 - m_prime / m_base.

    Conventions for a zero base score: 1 when both scores are zero,
    -inf when only the base is zero (any improvement counts as equivalent).
    Negative whenever the probe improves on the base.
    """
    if m_base == 0.0:
        return 1.0 if m_prime == 0.0 else float("-inf")
    return 1.0 - m_prime / m_base


def metric_score(name: str, a, b) -> float:
    if name == "accuracy":
        return accuracy_metric(a, b)
    if name == "f_measure":
        return f_measure(a, b)
    if name == "sbd":
        return symmetric_best_dice(a, b)
    raise ValueError(f"unknown metric {name!r}")


def is_equivalent(spec: EquivalenceSpec, base, probe, ground_truth=None,
                  base_score: float | None = None) -> bool:
    """Strict test distance < t for a probe output against a base output.

    In supervised mode the base score against the ground truth may be passed
    in so it is computed once per certification rather than once per probe.
    """
    if spec.mode == "supervised":
        if ground_truth is None:
            raise MissingGroundTruthError("supervised mode requires ground truth")
        if base_score is None:
            base_score = metric_score(spec.metric, base, ground_truth)
        probe_score = metric_score(spec.metric, probe, ground_truth)
        if spec.supervised_ratio == "base_over_probe":
            d = relative_distance(base_score, probe_score)
        else:
            d = relative_distance(probe_score, base_score)
        return d < spec.threshold
    d = induced_distance(metric_score(spec.metric, base, probe))
    return d < spec.threshold


# ---------------------------------------------------------------------------
# instance map fixtures: PGM-style integer grids
# ---------------------------------------------------------------------------

def save_instance_map(path, grid: np.ndarray) -> None:
    """Write an instance map as an ASCII P2 grid (one gray level per id)."""
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2:
        raise ValueError("instance map must be 2-D")
    h, w = grid.shape
    maxval = max(int(grid.max()), 1)
    lines = [f"P2\n{w} {h}\n{maxval}\n"]
    for row in grid:
        lines.append(" ".join(str(int(v)) for v in row) + "\n")
    with open(path, "w", encoding="ascii") as fh:
        fh.writelines(lines)


def load_instance_map(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise ValueError("not a P2 grid")
    w, h = int(tokens[1]), int(tokens[2])
    values = np.array([int(t) for t in tokens[4:4 + w * h]], dtype=np.int64)
    if values.size != w * h:
        raise ValueError("truncated grid data")
    return values.reshape(h, w)


def relabel_contiguous(grid: np.ndarray) -> np.ndarray:
    """Remap instance ids so they are contiguous from 0, preserving id order.

    Background (0) keeps id 0 whether or not it is present.
    """
    grid = np.asarray(grid, dtype=np.int64)
    ids = np.unique(grid)
    mapping = {}
    nxt = 1
    for i in ids:
        if i == 0:
            mapping[0] = 0
        else:
            mapping[int(i)] = nxt
            nxt += 1
    out = np.zeros_like(grid)
    for old, new in mapping.items():
        out[grid == old] = new
    return out
