import math

import numpy as np
import pytest

from equicert import autodiff as ad
from equicert.autodiff import Tape, Tensor, param
from equicert.stats import rng_stream


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff(fn, arrays, wrt, h=1e-5):
    """Central finite differences of a scalar fn at arrays, wrt one of them."""
    base = [a.copy() for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        up = fn(base)
        target[idx] = orig - h
        down = fn(base)
        target[idx] = orig
        grad[idx] = (up - down) / (2 * h)
        it.iternext()
    return grad


def check_grads(build, arrays, rel=1e-4):
    """Compare tape gradients of build(tensors) -> scalar against central FD."""
    tensors = [param(a.copy()) for a in arrays]
    with Tape() as tape:
        loss = build(tensors)
        tape.backward(loss)

    def as_scalar(datas):
        consts = [Tensor(d) for d in datas]
        return float(build(consts).data)

    for i, t in enumerate(tensors):
        fd = finite_diff(lambda ds: as_scalar(ds), arrays, i)
        got = t.grad_or_zero()
        denom = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(got - fd) / denom) < rel, f"input {i}"


def rnd(shape, seed=0, scale=1.0):
    return rng_stream(seed, 99, 0).normal(0, scale, size=shape)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_kl_div_identical_is_zero():
    p = Tensor(np.array([0.2, 0.8]))
    assert float(ad.kl_div(p, p).data) == 0.0


def test_kl_div_closed_form():
    p = Tensor(np.array([1.0, 0.0]))
    q = Tensor(np.array([0.5, 0.5]))
    assert float(ad.kl_div(p, q).data) == pytest.approx(math.log(2.0), abs=1e-9)


def test_kl_div_rejects_non_probabilities():
    with pytest.raises(ValueError):
        ad.kl_div(Tensor(np.array([1.5])), Tensor(np.array([0.5])))


def test_kl_div_nonnegative_random():
    rng = rng_stream(3, 99, 1)
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, size=8)
        q = rng.uniform(0.01, 0.99, size=8)
        val = float(ad.bernoulli_kl(Tensor(p), Tensor(q)).data)
        assert val >= 0.0
    assert float(ad.bernoulli_kl(Tensor(p), Tensor(p)).data) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_logits():
    # logit 0 means p = 1/2 for either class: loss ln 2
    z = Tensor(np.zeros((1,)))
    y = Tensor(np.ones((1,)))
    assert float(ad.cross_entropy(z, y).data) == pytest.approx(math.log(2.0))


def test_softmax_sums_to_one():
    x = Tensor(rnd((4, 7), seed=5))
    s = ad.softmax(x, axis=1)
    assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_range_and_stability():
    x = Tensor(np.array([-800.0, -5.0, 0.0, 5.0, 800.0]))
    y = ad.sigmoid(x).data
    assert np.all(y > 0.0) and np.all(y < 1.0)
    assert y[2] == 0.5


def test_forward_deterministic():
    x = rnd((2, 3, 8, 8), seed=11)
    k = rnd((4, 3, 3, 3), seed=12, scale=0.3)
    a = ad.conv2d(Tensor(x), Tensor(k), stride=1, pad=1).data
    b = ad.conv2d(Tensor(x), Tensor(k), stride=1, pad=1).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# simple backward identities
# ---------------------------------------------------------------------------

def test_backward_sum_is_ones():
    x = param(rnd((3, 4), seed=1))
    with Tape() as tape:
        loss = ad.tsum(x)
        tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_sigmoid_cross_entropy_at_zero():
    # logit 0 -> input gradient p - y with p = 0.5
    for y in (0.0, 1.0):
        z = param(np.zeros((1,)))
        with Tape() as tape:
            loss = ad.cross_entropy(z, Tensor(np.array([y])))
            tape.backward(loss)
        assert z.grad[0] == pytest.approx(0.5 - y, abs=1e-12)


def test_disconnected_gradient_is_zero():
    x = param(rnd((2, 2), seed=3))
    unused = param(rnd((2, 2), seed=4))
    with Tape() as tape:
        loss = ad.tsum(x)
        tape.backward(loss)
    assert np.array_equal(unused.grad_or_zero(), np.zeros((2, 2)))


def test_backward_requires_scalar():
    x = param(rnd((2, 2), seed=3))
    with Tape() as tape:
        out = ad.relu(x)
        with pytest.raises(ad.ShapeError):
            tape.backward(out)


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# finite-difference checks per primitive
# ---------------------------------------------------------------------------

def test_fd_elementwise_chain():
    arrays = [rnd((3, 4), seed=21), rnd((3, 4), seed=22)]
    check_grads(lambda t: ad.tsum(ad.mul(ad.relu(t[0]), ad.sigmoid(t[1]))), arrays)


def test_fd_affine():
    arrays = [rnd((5, 3), seed=31), rnd((3, 4), seed=32), rnd((4,), seed=33)]
    check_grads(lambda t: ad.tsum(ad.relu(ad.affine(t[0], t[1], t[2]))), arrays)


def test_fd_matmul_mean():
    arrays = [rnd((4, 3), seed=41), rnd((3, 5), seed=42)]
    check_grads(lambda t: ad.tmean(ad.matmul(t[0], t[1])), arrays)


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_fd_conv2d(stride, pad):
    arrays = [rnd((2, 3, 6, 7), seed=51), rnd((4, 3, 3, 3), seed=52, scale=0.4),
              rnd((4,), seed=53)]
    check_grads(
        lambda t: ad.tsum(ad.relu(ad.conv2d(t[0], t[1], t[2], stride=stride, pad=pad))),
        arrays)


def test_fd_softmax():
    arrays = [rnd((3, 5), seed=61)]
    w = rnd((3, 5), seed=62)
    check_grads(lambda t: ad.tsum(ad.mul_const(ad.softmax(t[0], axis=1), w)), arrays)


def test_fd_cross_entropy():
    z = rnd((4, 6), seed=71)
    y = (rng_stream(7, 99, 2).uniform(size=(4, 6)) > 0.5).astype(np.float64)
    check_grads(lambda t: ad.cross_entropy(t[0], Tensor(y)), [z])
    check_grads(lambda t: ad.cross_entropy(t[0], Tensor(y), reduction="sum"), [z])


def test_fd_kl_div_both_sides():
    rng = rng_stream(8, 99, 3)
    p = rng.uniform(0.05, 0.95, size=(3, 4))
    q = rng.uniform(0.05, 0.95, size=(3, 4))
    check_grads(lambda t: ad.bernoulli_kl(ad.sigmoid(t[0]), ad.sigmoid(t[1])),
                [np.log(p / (1 - p)), np.log(q / (1 - q))])


def test_fd_l2norm_select_tile():
    arrays = [rnd((3, 4, 5), seed=81)]

    def build(t):
        row = ad.select(t[0], 1)
        norms = ad.l2norm(row, axis=0)
        back = ad.tile_to(ad.reshape(ad.tsum(norms), (1, 1)), (4, 5))
        return ad.tmean(ad.mul_const(back, 2.0))
    check_grads(build, arrays)


def test_fd_reductions_axes():
    arrays = [rnd((2, 3, 4), seed=91)]
    check_grads(lambda t: ad.tsum(ad.mul(ad.tmean(t[0], axis=(0, 2)), ad.tmean(t[0], axis=(0, 2)))), arrays)


def test_fd_three_layer_net():
    rng = rng_stream(10, 99, 4)
    x = rng.normal(size=(8, 8))
    arrays = [
        rng.normal(size=(8, 16), scale=0.5),
        rng.normal(size=(16,), scale=0.1),
        rng.normal(size=(16, 8), scale=0.5),
        rng.normal(size=(8,), scale=0.1),
        rng.normal(size=(8, 1), scale=0.5),
        rng.normal(size=(1,), scale=0.1),
        x,
    ]

    def build(t):
        h1 = ad.relu(ad.affine(t[6], t[0], t[1]))
        h2 = ad.relu(ad.affine(h1, t[2], t[3]))
        out = ad.affine(h2, t[4], t[5])
        return ad.tmean(ad.mul(out, out))
    check_grads(build, arrays)


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------

def test_tape_replay():
    x = param(rnd((2, 3, 5, 5), seed=101))
    k = param(rnd((2, 3, 3, 3), seed=102, scale=0.4))
    with Tape() as tape:
        out = ad.conv2d(x, k, stride=1, pad=1)
        loss = ad.tmean(ad.mul(out, out))
        tape.backward(loss)
    assert tape.replay()


def test_tape_visits_each_node_once():
    x = param(rnd((4,), seed=111))
    with Tape() as tape:
        y = ad.mul(x, x)
        loss = ad.tsum(y)
        tape.backward(loss)
    assert len(tape.nodes) == 2
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_call_counter():
    ad.reset_backward_call_count()
    x = param(rnd((4,), seed=112))
    for _ in range(3):
        with Tape() as tape:
            tape.backward(ad.tsum(x))
    assert ad.backward_call_count() == 3


def test_no_tape_means_no_recording():
    x = param(rnd((4,), seed=113))
    out = ad.relu(x)
    assert out.is_leaf


def test_frozen_params_skip_grad():
    x = param(rnd((4,), seed=114))
    w = param(rnd((4,), seed=115))
    w.requires_grad = False
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, w))
        tape.backward(loss)
    assert w.grad is None
    assert np.allclose(x.grad, w.data)


def test_grad_wrt_input_restores_flags():
    class Lin:
        def __init__(self):
            self.w = param(np.array([[2.0], [3.0]]), name="w")

        def parameters(self):
            return {"w": self.w}

    model = Lin()

    def loss_fn(m, xt, target):
        return ad.tsum(ad.matmul(xt, m.w))

    g = ad.grad_wrt_input(model, loss_fn, np.ones((1, 2)), None)
    assert np.allclose(g, [[2.0, 3.0]])
    assert model.w.requires_grad
    assert model.w.grad is None
