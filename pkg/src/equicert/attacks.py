"""Input manipulations under L-inf and L2 budgets.

FGSM is one signed-gradient step; PGD iterates steps with projection back
onto the norm ball. Both maximize the training loss (segmentation
cross-entropy plus discriminative loss) by default; the robust
regularization term is never part of the attack objective. The ball
projection runs every iteration and the domain clip to [-1, 1] runs last,
so outputs always satisfy both constraints exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import LaneSample
from .metrics import f_measure, symmetric_best_dice
from .models import SegNet, discriminative_loss, predict_instances, segnet_forward
from .stats import STREAM_ATTACK, rng_stream

NORMS = ("linf", "l2")
LOSS_KINDS = ("combined", "seg")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8.0 / 255.0
    step: float = 2.0 / 255.0
    steps: int = 20
    random_start: bool = True
    loss: str = "combined"
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def clip_domain(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def project_ball(x: np.ndarray, x0: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project x onto the epsilon ball around x0 in the given norm."""
    if norm == "linf":
        return np.clip(x, x0 - epsilon, x0 + epsilon)
    delta = (x - x0).reshape(x.shape[0], -1)
    norms = np.sqrt((delta ** 2).sum(axis=1))
    factor = np.ones_like(norms)
    over = norms > epsilon
    factor[over] = epsilon / norms[over]
    delta = delta * factor[:, None]
    return x0 + delta.reshape(x.shape)


def attack_loss(model, x: Tensor, targets, kind: str = "combined") -> Tensor:
    """Loss tensor an attack ascends: full training loss or seg term only.

    Any model exposing attack_loss(x, targets) -> scalar Tensor can be
    attacked; segmentation models get the standard combined loss.
    """
    if hasattr(model, "attack_loss"):
        return model.attack_loss(x, targets)
    seg_gt, inst_gt = targets
    if kind == "seg":
        logits = model.forward_seg(x)
        return ad.cross_entropy(logits, Tensor(seg_gt.astype(np.float64)))
    logits, embedding = model.forward(x)
    seg_loss = ad.cross_entropy(logits, Tensor(seg_gt.astype(np.float64)))
    return ad.add(seg_loss, discriminative_loss(embedding, inst_gt))


def loss_and_input_grad(model: SegNet, x: np.ndarray, targets,
                        kind: str = "combined") -> tuple[float, np.ndarray]:
    """Evaluate the attack loss and its gradient with respect to x."""
    params = model.parameters()
    saved = {name: p.requires_grad for name, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            loss = attack_loss(model, xt, targets, kind)
            tape.backward(loss)
    finally:
        for name, p in params.items():
            p.requires_grad = saved[name]
    return float(loss.data), xt.grad_or_zero()


def loss_value(model: SegNet, x: np.ndarray, targets, kind: str = "combined") -> float:
    xt = Tensor(np.asarray(x, dtype=np.float64))
    return float(attack_loss(model, xt, targets, kind).data)


def fgsm(model: SegNet, x: np.ndarray, targets, epsilon: float,
         loss: str = "combined") -> np.ndarray:
    """Single signed-gradient ascent step, clipped to the input domain."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0.0:
        return x.copy()
    _, grad = loss_and_input_grad(model, x, targets, loss)
    return clip_domain(x + epsilon * np.sign(grad))


def _random_start(x: np.ndarray, cfg: AttackConfig, start_index: int) -> np.ndarray:
    """Per-sample uniform draw inside the attack ball."""
    out = np.empty_like(x)
    dim = int(np.prod(x.shape[1:]))
    for i in range(x.shape[0]):
        rng = rng_stream(cfg.seed, STREAM_ATTACK, start_index + i)
        if cfg.norm == "linf":
            out[i] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:])
        else:
            direction = rng.normal(size=x.shape[1:])
            norm = np.sqrt((direction ** 2).sum())
            if norm == 0.0:
                out[i] = 0.0
                continue
            radius = cfg.epsilon * rng.uniform() ** (1.0 / dim)
            out[i] = direction / norm * radius
    return out


def _ascend(x_adv: np.ndarray, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "linf":
        return x_adv + cfg.step * np.sign(grad)
    flat = grad.reshape(grad.shape[0], -1)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    out = x_adv.copy()
    moving = norms > 0.0
    unit = np.zeros_like(flat)
    unit[moving] = flat[moving] / norms[moving, None]
    out += cfg.step * unit.reshape(grad.shape)
    return out


def pgd(model: SegNet, x: np.ndarray, targets, cfg: AttackConfig,
        start_index: int = 0) -> np.ndarray:
    """Projected gradient ascent within the configured norm ball."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    if cfg.random_start:
        x_adv = clip_domain(x + _random_start(x, cfg, start_index))
    for _ in range(cfg.steps):
        _, grad = loss_and_input_grad(model, x_adv, targets, cfg.loss)
        x_adv = _ascend(x_adv, grad, cfg)
        x_adv = clip_domain(project_ball(x_adv, x, cfg.epsilon, cfg.norm))
    return x_adv


def pgd_loss_trace(model: SegNet, x: np.ndarray, targets, max_steps: int,
                   epsilon: float, step: float | None = None, norm: str = "linf",
                   loss: str = "combined", monotone: bool = False,
                   seed: int = 0, random_start: bool = True) -> list[float]:
    """Loss after each of max_steps PGD iterations.

    With monotone=True the trace reports the best loss reached so far, which
    makes it nondecreasing by construction.
    """
    if max_steps < 10:
        raise ValueError("trace needs at least 10 steps to say anything")
    cfg = AttackConfig(norm=norm, epsilon=epsilon,
                       step=step if step is not None else 2.0 / 255.0,
                       steps=1, random_start=random_start, loss=loss, seed=seed)
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    if cfg.random_start:
        x_adv = clip_domain(x + _random_start(x, cfg, 0))
    trace: list[float] = []
    best = -np.inf
    for _ in range(max_steps):
        _, grad = loss_and_input_grad(model, x_adv, targets, cfg.loss)
        x_adv = clip_domain(project_ball(_ascend(x_adv, grad, cfg), x, epsilon, norm))
        current = loss_value(model, x_adv, targets, cfg.loss)
        if monotone:
            best = max(best, current)
            trace.append(best)
        else:
            trace.append(current)
    return trace


@dataclass(frozen=True)
class SecurityPoint:
    epsilon: float
    f_measure: float
    sbd: float

    @property
    def combined(self) -> float:
        return self.f_measure + self.sbd


def evaluate_batch(model: SegNet, images: np.ndarray, seg_gts, inst_gts) -> tuple[float, float]:
    """Mean F-measure and mean SBD of model predictions on a batch."""
    out = segnet_forward(model, images)
    maps = predict_instances(model, images)
    fs, sbds = [], []
    for i in range(images.shape[0]):
        fs.append(f_measure(out.seg_probs[i] > 0.5, seg_gts[i]))
        sbds.append(symmetric_best_dice(maps[i], inst_gts[i]))
    return float(np.mean(fs)), float(np.mean(sbds))


def security_curve(model: SegNet, samples: Sequence[LaneSample],
                   epsilons: Sequence[float], steps: int = 10, norm: str = "linf",
                   loss: str = "combined", seed: int = 0,
                   chunk: int = 20) -> list[SecurityPoint]:
    """Model performance under PGD as the budget grows.

    Per budget eps the attack runs the stated number of steps at step size
    3 * eps / (2 * steps); eps = 0 reports natural performance.
    """
    eps_list = [float(e) for e in epsilons]
    if any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilons must be increasing")
    images = np.stack([s.image for s in samples])
    seg_gts = [s.seg_gt for s in samples]
    inst_gts = [s.inst_gt for s in samples]
    points = []
    for e_idx, eps in enumerate(eps_list):
        if eps == 0.0:
            adv = images
        else:
            cfg = AttackConfig(norm=norm, epsilon=eps, step=3.0 * eps / (2.0 * steps),
                               steps=steps, random_start=True, loss=loss, seed=seed)
            parts = []
            for lo in range(0, images.shape[0], chunk):
                hi = min(lo + chunk, images.shape[0])
                batch_targets = (np.stack(seg_gts[lo:hi]), np.stack(inst_gts[lo:hi]))
                parts.append(pgd(model, images[lo:hi], batch_targets, cfg,
                                 start_index=e_idx * (1 << 32) + lo))
            adv = np.concatenate(parts)
        mean_f, mean_sbd = evaluate_batch(model, adv, seg_gts, inst_gts)
        points.append(SecurityPoint(epsilon=eps, f_measure=mean_f, sbd=mean_sbd))
    return points
