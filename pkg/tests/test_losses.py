import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samfed import tensor as T
from samfed.agreement import PseudoLabelSet
from samfed.errors import EmptyBatch, LabelOutOfRange, ShapeMismatch
from samfed.losses import batch_unsup_loss, kl_fusion_loss, supervised_ce, weighted_ce
from samfed.tensor import Tensor

from conftest import central_fd, rel_err


def loop_weighted_ce(logits, labels, lam):
    H, W, N = logits.shape
    total = 0.0
    for i in range(H):
        for j in range(W):
            z = [float(v) for v in logits[i, j]]
            m = max(z)
            p = math.exp(z[labels[i, j]] - m) / sum(math.exp(v - m) for v in z)
            total += lam[i, j] * -math.log(max(p, 1e-12))
    return total / (H * W)


def loop_kl(srv, cli):
    H, W, N = srv.shape
    total = 0.0
    for i in range(H):
        for j in range(W):
            for n in range(N):
                p, q = srv[i, j, n], cli[i, j, n]
                if p > 0:
                    total += p * (math.log(p) - math.log(max(q, 1e-12)))
    return total / (H * W)


def pls(labels, lam):
    labels = np.asarray(labels)
    return PseudoLabelSet(labels, np.asarray(lam, float), np.zeros(labels.shape, bool))


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_weighted_ce_examples():
    sure = Tensor(np.array([[[50.0, -50.0]]]))
    assert weighted_ce(sure, pls([[0]], [[1.0]])).item() == pytest.approx(0.0, abs=1e-12)
    half = Tensor(np.zeros((1, 1, 2)))
    assert weighted_ce(half, pls([[1]], [[0.5]])).item() == pytest.approx(0.5 * math.log(2), abs=1e-6)


def test_weighted_ce_vs_loop_and_fd(rng):
    z = rng.normal(size=(4, 4, 3)).astype(np.float32)
    labels = rng.integers(0, 3, size=(4, 4))
    lam = rng.uniform(1 / 3, 1, size=(4, 4))
    pl = pls(labels, lam)
    x = Tensor(z, requires_grad=True)
    with T.Tape() as tape:
        loss = weighted_ce(x, pl)
    T.backward(tape, loss)
    assert abs(loss.item() - loop_weighted_ce(z, labels, lam)) < 1e-6
    z64 = z.astype(np.float64)
    fd = central_fd(lambda: loop_weighted_ce(z64, labels, lam), [z64])
    assert rel_err(x.grad.reshape(-1), fd) < 1e-2


def test_weighted_ce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        weighted_ce(Tensor(np.zeros((2, 2, 2))), pls(np.zeros((3, 2), int), np.ones((3, 2))))


def test_batch_unsup_loss(rng):
    z = Tensor(rng.normal(size=(3, 3, 2)))
    pl = pls(rng.integers(0, 2, (3, 3)), rng.uniform(0.5, 1, (3, 3)))
    one = batch_unsup_loss([(z, pl)]).item()
    assert one == weighted_ce(z, pl).item()
    assert batch_unsup_loss([(z, pl), (z, pl)]).item() == pytest.approx(one, rel=1e-7)
    with pytest.raises(EmptyBatch):
        batch_unsup_loss([])


def test_zero_weights_give_zero_loss_and_gradient(rng):
    z = Tensor(rng.normal(size=(3, 3, 2)), requires_grad=True)
    pl = pls(rng.integers(0, 2, (3, 3)), np.zeros((3, 3)))
    with T.Tape() as tape:
        loss = batch_unsup_loss([(z, pl)])
    T.backward(tape, loss)
    assert loss.item() == 0.0
    assert not z.grad.any()


def test_batch_unsup_loss_gradient_fd(rng):
    items = [(rng.normal(size=(3, 4, 2)), rng.integers(0, 2, (3, 4)), rng.uniform(0.5, 1, (3, 4)))
             for _ in range(3)]
    ts = [Tensor(z.astype(np.float32), requires_grad=True) for z, _, _ in items]
    with T.Tape() as tape:
        loss = batch_unsup_loss([(t, pls(lab, lam)) for t, (_, lab, lam) in zip(ts, items)])
    T.backward(tape, loss)
    zs = [t.data.astype(np.float64) for t in ts]

    def f():
        return sum(loop_weighted_ce(z, lab, lam) for z, (_, lab, lam) in zip(zs, items)) / len(zs)

    fd = central_fd(f, zs)
    analytic = np.concatenate([t.grad.reshape(-1) for t in ts])
    assert rel_err(analytic, fd) < 1e-2


def test_supervised_ce():
    logits = np.full((2, 2, 2), -30.0)
    mask = np.array([[0, 1], [1, 0]])
    for i in range(2):
        for j in range(2):
            logits[i, j, mask[i, j]] = 30.0
    assert supervised_ce(Tensor(logits), mask).item() == pytest.approx(0.0, abs=1e-12)
    assert supervised_ce(Tensor(np.zeros((2, 2, 2))), mask).item() == pytest.approx(math.log(2), abs=1e-6)
    with pytest.raises(LabelOutOfRange):
        supervised_ce(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 2))


def test_supervised_ce_is_weighted_ce_with_unit_weights(rng):
    z = Tensor(rng.normal(size=(4, 4, 3)))
    mask = rng.integers(0, 3, (4, 4))
    assert supervised_ce(z, mask).item() == weighted_ce(z, pls(mask, np.ones((4, 4)))).item()


def test_kl_examples():
    p = softmax(np.random.default_rng(0).normal(size=(3, 3, 2)))
    assert kl_fusion_loss(Tensor(p), p).item() == pytest.approx(0.0, abs=1e-6)
    srv = np.array([[[1.0, 0.0]]])
    assert kl_fusion_loss(Tensor(np.full((1, 1, 2), 0.5)), srv).item() == pytest.approx(math.log(2), abs=1e-6)


def test_kl_vs_loop_and_shape(rng):
    srv = softmax(rng.normal(size=(5, 4, 3)))
    cli = softmax(rng.normal(size=(5, 4, 3)))
    assert abs(kl_fusion_loss(Tensor(cli), srv).item() - loop_kl(srv, cli)) < 1e-6
    with pytest.raises(ShapeMismatch):
        kl_fusion_loss(Tensor(cli), srv[:4])


def test_kl_gradient_only_into_client(rng):
    srv = softmax(rng.normal(size=(3, 3, 2)))
    z = Tensor(rng.normal(size=(3, 3, 2)).astype(np.float32), requires_grad=True)
    with T.Tape() as tape:
        loss = kl_fusion_loss(T.softmax_channels(z), srv)
    T.backward(tape, loss)
    z64 = z.data.astype(np.float64)
    fd = central_fd(lambda: loop_kl(srv, softmax(z64)), [z64])
    assert rel_err(z.grad.reshape(-1), fd) < 1e-2


# -- properties ----------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_weighted_ce_nonneg_and_monotone_in_lambda(seed, n):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(3, 3, n)) * 3)
    labels = rng.integers(0, n, (3, 3))
    lam = rng.uniform(0, 1, (3, 3))
    bigger = np.minimum(lam + rng.uniform(0, 0.5, (3, 3)), 1.0)
    a = weighted_ce(z, pls(labels, lam)).item()
    b = weighted_ce(z, pls(labels, bigger)).item()
    assert a >= 0
    assert b >= a - 1e-7


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_kl_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    srv = softmax(rng.normal(size=(2, 3, n)) * 3)
    cli = softmax(rng.normal(size=(2, 3, n)) * 3)
    assert kl_fusion_loss(Tensor(cli), srv).item() >= -1e-6
