"""Training procedures: standard, fast single-step adversarial (two backward
passes per batch), and the same with a robust KL regularizer on the
segmentation branch (two plus N backward passes per batch).

All stochastic pieces draw from counter-based streams keyed by absolute
indices (epoch, global batch, sample slot), so runs are bit-reproducible and
checkpoint resume continues exactly where an uninterrupted run would be.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import serialize
from .attacks import AttackConfig, evaluate_batch, loss_and_input_grad, pgd
from .autodiff import Tape, Tensor
from .data import LaneDataset, LaneSample
from .models import SegNet, combined_loss, discriminative_loss
from .stats import STREAM_FBF, STREAM_SHUFFLE, STREAM_TRADES, rng_stream

METHODS = ("standard", "fbf", "fbf_trades")

# the robust-weight recommendation for classifiers, divided by the pixel
# count the KL sum ranges over, scaled here from a 320x180 reference grid
_BETA_REFERENCE = 2.0e-5
_BETA_REFERENCE_PIXELS = 320 * 180

_BATCH_SLOT_STRIDE = 1 << 20


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "standard"
    epochs: int = 15
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epsilon: float = 8.0 / 255.0
    fgsm_step: float | None = None      # defaults to 1.25 * epsilon
    trades_steps: int = 10
    trades_step: float | None = None    # defaults to epsilon / 10
    beta: float | None = None           # defaults to the pixel-scaled reference
    seed: int = 0
    embed_dim: int = 4
    adv_eval_steps: int = 20
    adv_eval_every: int = 1
    eval_chunk: int = 20

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.trades_steps < 1:
            raise ValueError("trades_steps must be >= 1")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.adv_eval_every < 1:
            raise ValueError("adv_eval_every must be >= 1")

    @property
    def fgsm_step_value(self) -> float:
        return 1.25 * self.epsilon if self.fgsm_step is None else self.fgsm_step

    @property
    def trades_step_value(self) -> float:
        return self.epsilon / 10.0 if self.trades_step is None else self.trades_step

    def beta_value(self, pixels: int) -> float:
        if self.beta is not None:
            return self.beta
        return _BETA_REFERENCE * (_BETA_REFERENCE_PIXELS / pixels)


@dataclass
class EpochRecord:
    epoch: int
    nat_f: float
    nat_sbd: float
    adv_f: float | None
    adv_sbd: float | None
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_natural_combined(self) -> float:
        return max((r.nat_f + r.nat_sbd) for r in self.records)


class SGD:
    """Classical momentum: v <- mu v + g, theta <- theta - lr v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def state(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            self.velocity[name] = state[name].copy()


def _check_finite(loss: float, epoch: int, batch: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def _batches(samples: list[LaneSample], cfg: TrainConfig, epoch: int):
    order = rng_stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(samples))
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        batch = [samples[i] for i in idx]
        x = np.stack([s.image for s in batch])
        seg = np.stack([s.seg_gt for s in batch]).astype(np.float64)
        inst = np.stack([s.inst_gt for s in batch])
        yield x, seg, inst


def standard_epoch(model: SegNet, samples: list[LaneSample], opt: SGD,
                   cfg: TrainConfig, epoch: int) -> float:
    """One pass of plain SGD on the combined loss; returns the mean loss."""
    losses = []
    for b_idx, (x, seg, inst) in enumerate(_batches(samples, cfg, epoch)):
        opt.zero_grad()
        with Tape() as tape:
            loss = combined_loss(model, Tensor(x), seg, inst)
            _check_finite(float(loss.data), epoch, b_idx)
            tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return float(np.mean(losses)) if losses else 0.0


def _fbf_perturb(model: SegNet, x: np.ndarray, seg: np.ndarray, inst: np.ndarray,
                 cfg: TrainConfig, global_batch: int) -> np.ndarray:
    """Random-start single-step perturbation within the L-inf ball."""
    delta = np.empty_like(x)
    base = global_batch * _BATCH_SLOT_STRIDE
    for i in range(x.shape[0]):
        rng = rng_stream(cfg.seed, STREAM_FBF, base + i)
        delta[i] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:])
    _, grad = loss_and_input_grad(model, x + delta, (seg, inst))
    delta = np.clip(delta + cfg.fgsm_step_value * np.sign(grad),
                    -cfg.epsilon, cfg.epsilon)
    return np.clip(x + delta, -1.0, 1.0)


def fbf_epoch(model: SegNet, samples: list[LaneSample], opt: SGD,
              cfg: TrainConfig, epoch: int, batches_per_epoch: int | None = None) -> float:
    """Adversarial epoch: one perturbation pass and one weight pass per batch."""
    if cfg.method == "standard":
        raise ValueError("fbf_epoch requires an adversarial method config")
    losses = []
    n_batches = batches_per_epoch
    if n_batches is None:
        n_batches = (len(samples) + cfg.batch_size - 1) // cfg.batch_size
    for b_idx, (x, seg, inst) in enumerate(_batches(samples, cfg, epoch)):
        x_adv = _fbf_perturb(model, x, seg, inst, cfg, epoch * n_batches + b_idx)
        opt.zero_grad()
        with Tape() as tape:
            if cfg.method == "fbf_trades":
                loss = trades_total_loss(model, x_adv, seg, inst, cfg,
                                         noise_index=epoch * n_batches + b_idx)
            else:
                loss = combined_loss(model, Tensor(x_adv), seg, inst)
            _check_finite(float(loss.data), epoch, b_idx)
            tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return float(np.mean(losses)) if losses else 0.0


def trades_adversary(model: SegNet, x: np.ndarray, cfg: TrainConfig,
                     noise_index: int = 0) -> np.ndarray:
    """KL-maximizing neighbour of x against the segmentation branch.

    Starts at x plus small Gaussian noise and takes trades_steps
    signed-gradient ascent steps on the KL between the (fixed) base
    segmentation and its own, projected to the L-inf ball and the domain
    after every step.
    """
    x = np.asarray(x, dtype=np.float64)
    base = noise_index * _BATCH_SLOT_STRIDE
    init = np.empty_like(x)
    for i in range(x.shape[0]):
        rng = rng_stream(cfg.seed, STREAM_TRADES, base + i)
        init[i] = 0.001 * rng.normal(size=x.shape[1:])
    x_prime = np.clip(np.clip(x + init, x - cfg.epsilon, x + cfg.epsilon), -1.0, 1.0)

    # fixed target: the segmentation of x, detached from any tape
    base_probs = ad._k_sigmoid([model.forward_seg(Tensor(x)).data], None)

    params = model.parameters()
    saved = {name: p.requires_grad for name, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        for _ in range(cfg.trades_steps):
            xt = Tensor(x_prime, requires_grad=True)
            with Tape() as tape:
                probs = ad.sigmoid(model.forward_seg(xt))
                div = ad.bernoulli_kl(Tensor(base_probs), probs)
                tape.backward(div)
            grad = xt.grad_or_zero()
            x_prime = x_prime + cfg.trades_step_value * np.sign(grad)
            x_prime = np.clip(np.clip(x_prime, x - cfg.epsilon, x + cfg.epsilon), -1.0, 1.0)
    finally:
        for name, p in params.items():
            p.requires_grad = saved[name]
    return x_prime


def trades_total_loss(model: SegNet, x: np.ndarray, y_seg: np.ndarray,
                      y_inst: np.ndarray, cfg: TrainConfig,
                      noise_index: int = 0) -> Tensor:
    """Base losses on x plus beta times the segmentation KL against a
    KL-maximizing neighbour of x.

    The final loss lets gradients flow through both forward passes.
    """
    x = np.asarray(x, dtype=np.float64)
    x_prime = trades_adversary(model, x, cfg, noise_index)

    logits, embedding = model.forward(Tensor(x))
    seg_loss = ad.cross_entropy(logits, Tensor(y_seg.astype(np.float64)))
    inst_loss = discriminative_loss(embedding, y_inst)
    probs_nat = ad.sigmoid(logits)
    probs_adv = ad.sigmoid(model.forward_seg(Tensor(x_prime)))
    beta = cfg.beta_value(int(x.shape[2]) * int(x.shape[3]))
    robust = ad.scale(ad.bernoulli_kl(probs_nat, probs_adv), beta)
    return ad.add(ad.add(seg_loss, inst_loss), robust)


# ---------------------------------------------------------------------------
# full training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SegNet
    history: TrainHistory
    best_epoch: int
    final_state: dict[str, np.ndarray]
    final_velocity: dict[str, np.ndarray]


def _evaluate(model: SegNet, samples: list[LaneSample], cfg: TrainConfig,
              attack: AttackConfig | None, epoch: int) -> tuple[float, float]:
    images = np.stack([s.image for s in samples])
    seg_gts = [s.seg_gt for s in samples]
    inst_gts = [s.inst_gt for s in samples]
    if attack is None:
        return evaluate_batch(model, images, seg_gts, inst_gts)
    parts = []
    for lo in range(0, images.shape[0], cfg.eval_chunk):
        hi = min(lo + cfg.eval_chunk, images.shape[0])
        targets = (np.stack(seg_gts[lo:hi]), np.stack(inst_gts[lo:hi]))
        parts.append(pgd(model, images[lo:hi], targets, attack,
                         start_index=epoch * _BATCH_SLOT_STRIDE + lo))
    return evaluate_batch(model, np.concatenate(parts), seg_gts, inst_gts)


def train(cfg: TrainConfig, dataset: LaneDataset,
          start_state: dict | None = None) -> TrainResult:
    """Run the configured method, tracking validation metrics per epoch.

    The returned model carries the parameters of the epoch with the best
    natural F-measure + SBD sum on the validation split. start_state resumes
    from a checkpoint produced by checkpoint_state.
    """
    model = SegNet.build(channels=dataset.config.channels,
                         embed_dim=cfg.embed_dim, seed=cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    first_epoch = 0
    if start_state is not None:
        model.load_state(start_state["params"])
        opt.load_state(start_state["velocity"])
        first_epoch = int(start_state["epoch"])

    history = TrainHistory()
    best_score = -np.inf
    best_epoch = -1
    best_params = model.state()

    eval_attack = None
    if cfg.epsilon > 0:
        eval_attack = AttackConfig(
            norm="linf", epsilon=cfg.epsilon, step=2.0 / 255.0,
            steps=cfg.adv_eval_steps, random_start=True, loss="combined",
            seed=cfg.seed)

    for epoch in range(first_epoch, cfg.epochs):
        t0 = time.perf_counter()
        if cfg.method == "standard":
            standard_epoch(model, dataset.train, opt, cfg, epoch)
        else:
            fbf_epoch(model, dataset.train, opt, cfg, epoch)

        nat_f, nat_sbd = _evaluate(model, dataset.val, cfg, None, epoch)
        adv_f = adv_sbd = None
        if eval_attack is not None and (epoch + 1) % cfg.adv_eval_every == 0:
            adv_f, adv_sbd = _evaluate(model, dataset.val, cfg, eval_attack, epoch)
        seconds = time.perf_counter() - t0
        history.records.append(EpochRecord(
            epoch=epoch + 1, nat_f=nat_f, nat_sbd=nat_sbd,
            adv_f=adv_f, adv_sbd=adv_sbd, seconds=seconds))

        score = nat_f + nat_sbd
        if score > best_score:
            best_score = score
            best_epoch = epoch + 1
            best_params = model.state()

    final_state = model.state()
    final_velocity = opt.state()
    model.load_state(best_params)
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       final_state=final_state, final_velocity=final_velocity)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult) -> None:
    """Persist the final (not best) parameters plus optimizer state so a
    longer run can resume bit-exactly."""
    tensors = {}
    for name, arr in result.final_state.items():
        tensors[f"param.{name}"] = arr
    for name, arr in result.final_velocity.items():
        tensors[f"velocity.{name}"] = arr
    tensors["meta.epoch"] = np.array(float(len(result.history.records) and
                                           result.history.records[-1].epoch))
    serialize.save_tensors(path, tensors)


def load_checkpoint(path) -> dict:
    tensors = serialize.load_tensors(path)
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    velocity = {k[len("velocity."):]: v for k, v in tensors.items() if k.startswith("velocity.")}
    return {"params": params, "velocity": velocity,
            "epoch": int(tensors["meta.epoch"])}
