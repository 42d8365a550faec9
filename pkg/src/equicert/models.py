"""Toy two-branch instance segmentation network.

A small shared conv trunk feeds a binary segmentation head (per-pixel lane
logit, sigmoid at inference) and an instance embedding head with separate
parameters. Instances at inference come from greedy clustering of the
embedding vectors of the predicted lane pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tape, Tensor, param
from .stats import STREAM_INIT, rng_stream

DELTA_V = 0.5
DELTA_D = 1.5
DISC_WEIGHTS = (1.0, 1.0, 0.001)


@dataclass
class SegOutput:
    """Inference outputs for a batch: lane probabilities and embeddings."""

    seg_probs: np.ndarray   # (B, H, W) in [0, 1]
    embedding: np.ndarray   # (B, E, H, W)


class SegNet:
    """Conv trunk plus two conv heads; all conv kernels 3x3, stride 1, pad 1."""

    TRUNK = (12, 16, 16)
    HEAD = 12

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @property
    def channels(self) -> int:
        return self.params["trunk0_w"].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.params["emb1_w"].shape[0]

    @classmethod
    def layer_shapes(cls, channels: int = 1, embed_dim: int = 4) -> dict[str, tuple]:
        t0, t1, t2 = cls.TRUNK
        h = cls.HEAD
        return {
            "trunk0_w": (t0, channels, 3, 3), "trunk0_b": (t0,),
            "trunk1_w": (t1, t0, 3, 3), "trunk1_b": (t1,),
            "trunk2_w": (t2, t1, 3, 3), "trunk2_b": (t2,),
            "seg0_w": (h, t2, 3, 3), "seg0_b": (h,),
            "seg1_w": (1, h, 3, 3), "seg1_b": (1,),
            "emb0_w": (h, t2, 3, 3), "emb0_b": (h,),
            "emb1_w": (embed_dim, h, 3, 3), "emb1_b": (embed_dim,),
        }

    @classmethod
    def build(cls, channels: int = 1, embed_dim: int = 4, seed: int = 0) -> "SegNet":
        """He-normal weights, zero biases, one RNG stream index per tensor."""
        params: dict[str, Tensor] = {}
        for idx, (name, shape) in enumerate(cls.layer_shapes(channels, embed_dim).items()):
            if name.endswith("_b"):
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                data = rng_stream(seed, STREAM_INIT, idx).normal(0.0, std, size=shape)
            params[name] = param(data, name=name)
        return cls(params)

    @classmethod
    def zeros(cls, channels: int = 1, embed_dim: int = 4) -> "SegNet":
        params = {name: param(np.zeros(shape), name=name)
                  for name, shape in cls.layer_shapes(channels, embed_dim).items()}
        return cls(params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _trunk(self, x: Tensor) -> Tensor:
        """Shared trunk on channels-last activations."""
        p = self.params
        t = ad.transpose(x, (0, 2, 3, 1))
        t = ad.relu(ad.conv3x3_nhwc(t, p["trunk0_w"], p["trunk0_b"]))
        t = ad.relu(ad.conv3x3_nhwc(t, p["trunk1_w"], p["trunk1_b"]))
        return ad.relu(ad.conv3x3_nhwc(t, p["trunk2_w"], p["trunk2_b"]))

    def _seg_head(self, trunk: Tensor) -> Tensor:
        p = self.params
        s = ad.relu(ad.conv3x3_nhwc(trunk, p["seg0_w"], p["seg0_b"]))
        logits = ad.conv3x3_nhwc(s, p["seg1_w"], p["seg1_b"])
        b, h, w, _ = logits.shape
        return ad.reshape(logits, (b, h, w))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (seg_logits (B,H,W), embedding (B,E,H,W)) for x (B,C,H,W)."""
        p = self.params
        t = self._trunk(x)
        seg_logits = self._seg_head(t)
        e = ad.relu(ad.conv3x3_nhwc(t, p["emb0_w"], p["emb0_b"]))
        embedding = ad.conv3x3_nhwc(e, p["emb1_w"], p["emb1_b"])
        return seg_logits, ad.transpose(embedding, (0, 3, 1, 2))

    def forward_seg(self, x: Tensor) -> Tensor:
        """Segmentation logits only; skips the embedding head."""
        return self._seg_head(self._trunk(x))

    def clone(self) -> "SegNet":
        return SegNet({name: param(p.data.copy(), name=name) for name, p in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = state[name].astype(np.float64).copy()


def segnet_forward(model: SegNet, x: np.ndarray) -> SegOutput:
    """Inference pass on a numpy batch (B,C,H,W); no tape is recorded."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ad.ShapeError(f"expected (B,C,H,W), got {x.shape}")
    logits, embedding = model.forward(Tensor(x))
    return SegOutput(seg_probs=ad._k_sigmoid([logits.data], None), embedding=embedding.data)


def save_model(path, model: SegNet) -> None:
    serialize.save_tensors(path, {name: p.data for name, p in model.params.items()})


def load_model(path) -> SegNet:
    tensors = serialize.load_tensors(path)
    return SegNet({name: param(arr, name=name) for name, arr in tensors.items()})


# ---------------------------------------------------------------------------
# discriminative embedding loss
# ---------------------------------------------------------------------------

def discriminative_loss(embedding: Tensor, inst_gt: np.ndarray,
                        delta_v: float = DELTA_V, delta_d: float = DELTA_D,
                        weights: tuple[float, float, float] = DISC_WEIGHTS) -> Tensor:
    """Pull pixels toward their instance mean, push means apart, keep means small.

    Hinged three-term form: within delta_v of the mean costs nothing, means
    closer than 2*delta_d cost quadratically, and mean norms are lightly
    regularized. Samples without instance pixels contribute zero.
    """
    w_var, w_dist, w_reg = weights
    batch, e_dim = embedding.shape[0], embedding.shape[1]
    pixels = int(embedding.shape[2]) * int(embedding.shape[3])
    per_sample: list[Tensor] = []

    for b in range(batch):
        ids = [int(i) for i in np.unique(inst_gt[b]) if i != 0]
        if not ids:
            per_sample.append(Tensor(np.zeros(())))
            continue
        emb = ad.reshape(ad.select(embedding, b), (e_dim, pixels))
        flat_gt = inst_gt[b].reshape(-1)

        means: list[Tensor] = []
        var_terms: list[Tensor] = []
        for k in ids:
            mask = (flat_gt == k).astype(np.float64)
            count = float(mask.sum())
            mean_k = ad.scale(ad.tsum(ad.mul_const(emb, mask[None, :]), axis=1), 1.0 / count)
            means.append(mean_k)
            diff = ad.sub(emb, ad.tile_to(ad.reshape(mean_k, (e_dim, 1)), (e_dim, pixels)))
            dist = ad.l2norm(diff, axis=0)
            hinge = ad.relu(ad.add_const(dist, -delta_v))
            var_terms.append(ad.scale(ad.tsum(ad.mul_const(ad.mul(hinge, hinge), mask)), 1.0 / count))
        l_var = ad.scale(_accumulate(var_terms), 1.0 / len(ids))

        if len(ids) > 1:
            pair_terms: list[Tensor] = []
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    gap = ad.l2norm(ad.sub(means[i], means[j]), axis=0)
                    hinge = ad.relu(ad.rsub_const(2.0 * delta_d, gap))
                    pair_terms.append(ad.mul(hinge, hinge))
            l_dist = ad.scale(_accumulate(pair_terms), 1.0 / len(pair_terms))
        else:
            l_dist = Tensor(np.zeros(()))

        l_reg = ad.scale(_accumulate([ad.l2norm(m, axis=0) for m in means]), 1.0 / len(ids))

        total = ad.add(ad.add(ad.scale(l_var, w_var), ad.scale(l_dist, w_dist)),
                       ad.scale(l_reg, w_reg))
        per_sample.append(total)

    return ad.scale(_accumulate(per_sample), 1.0 / batch)


def _accumulate(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def combined_loss(model: SegNet, x: Tensor, seg_gt: np.ndarray, inst_gt: np.ndarray) -> Tensor:
    """Segmentation cross-entropy plus discriminative loss for a batch."""
    logits, embedding = model.forward(x)
    seg_loss = ad.cross_entropy(logits, Tensor(seg_gt.astype(np.float64)))
    inst_loss = discriminative_loss(embedding, inst_gt)
    return ad.add(seg_loss, inst_loss)


# ---------------------------------------------------------------------------
# embedding clustering
# ---------------------------------------------------------------------------

def cluster_instances(seg_probs: np.ndarray, embedding: np.ndarray,
                      threshold: float = 0.5, delta_v: float = DELTA_V,
                      max_rounds: int = 10) -> np.ndarray:
    """Greedy clustering of lane-pixel embeddings into an instance map.

    Scan lane pixels in row-major order; each unassigned pixel seeds a
    cluster, which absorbs all unassigned lane pixels within delta_v of its
    running mean, iterating the mean to a fixpoint (bounded rounds).
    """
    h, w = seg_probs.shape
    lane = (seg_probs > threshold).reshape(-1)
    emb = embedding.reshape(embedding.shape[0], -1)
    labels = np.zeros(h * w, dtype=np.int64)
    unassigned = lane.copy()
    next_id = 1

    for idx in np.flatnonzero(lane):
        if not unassigned[idx]:
            continue
        mean = emb[:, idx].copy()
        members = None
        for _ in range(max_rounds):
            cand = np.flatnonzero(unassigned)
            d2 = ((emb[:, cand] - mean[:, None]) ** 2).sum(axis=0)
            selected = cand[d2 <= delta_v * delta_v]
            if selected.size == 0:
                break
            if members is not None and np.array_equal(selected, members):
                break
            members = selected
            mean = emb[:, members].mean(axis=1)
        if members is None or members.size == 0:
            members = np.array([idx])
        labels[members] = next_id
        unassigned[members] = False
        next_id += 1

    return labels.reshape(h, w)


def predict_instances(model: SegNet, x: np.ndarray,
                      threshold: float = 0.5) -> list[np.ndarray]:
    """Instance maps for a numpy batch."""
    out = segnet_forward(model, x)
    return [cluster_instances(out.seg_probs[i], out.embedding[i], threshold)
            for i in range(x.shape[0])]


def make_evaluator(model: SegNet, kind: str):
    """Adapt a model to the certification evaluator protocol.

    kind "sbd" yields instance maps, "f_measure" binary lane masks.
    """
    if kind == "sbd":
        def f(batch):
            return predict_instances(model, batch)
        return f
    if kind == "f_measure":
        def f(batch):
            out = segnet_forward(model, batch)
            return [out.seg_probs[i] > 0.5 for i in range(batch.shape[0])]
        return f
    raise ValueError(f"unknown evaluator kind {kind!r}")
