"""Central finite differences vs backward() for every layer and loss op.

All checks run on the float64 path with inputs of size <= 64, twenty
random instances per op, relative tolerance 1e-3.
"""

import numpy as np
import pytest

from multiexit import losses
from multiexit import tensor as T
from conftest import assert_grads_close, finite_diff_grad

SEEDS = list(range(20))


def check_op(make_loss, tensors: dict[str, T.Tensor], h: float = 1e-4):
    """make_loss() rebuilds the scalar Tensor from the buffers' current
    contents; called once under a tape for backward, then repeatedly
    (untaped) for the finite differences."""
    with T.Tape() as tape:
        loss = make_loss()
    T.backward(tape, loss)
    for name, t in tensors.items():
        numeric = finite_diff_grad(lambda: make_loss().item(), t.data, h=h)
        assert t.grad is not None, f"{name}: grad not populated"
        assert_grads_close(t.grad, numeric)


def p64(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def reducer(seed, shape):
    """Fixed random weighting so element-permutation bugs cannot cancel."""
    r = T.Tensor(np.random.default_rng(seed + 777).normal(size=shape), dtype=np.float64)
    return lambda out: T.sum_all(T.mul(out, r))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear(seed):
    rng = np.random.default_rng(seed)
    x, w, b = p64(rng, 3, 5), p64(rng, 4, 5), p64(rng, 4)
    red = reducer(seed, (3, 4))
    check_op(lambda: red(T.linear(x, w, b)), {"x": x, "w": w, "b": b})


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv2d(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = p64(rng, 2, 2, 4, 4)
    w = p64(rng, 3, 2, 3, 3)
    out_shape = T.conv2d(x.detach(), w.detach(), stride, pad).shape
    red = reducer(seed, out_shape)
    check_op(lambda: red(T.conv2d(x, w, stride, pad)), {"x": x, "w": w})


@pytest.mark.parametrize("seed", SEEDS)
def test_relu(seed):
    rng = np.random.default_rng(seed)
    # keep inputs away from the kink at 0
    vals = rng.uniform(0.05, 1.0, size=(4, 8)) * rng.choice([-1.0, 1.0], size=(4, 8))
    x = T.Tensor(vals, requires_grad=True, dtype=np.float64)
    red = reducer(seed, (4, 8))
    check_op(lambda: red(T.relu(x)), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_max_pool(seed):
    rng = np.random.default_rng(seed)
    # distinct well-separated values so perturbation never flips the argmax
    vals = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8) * 0.1
    x = T.Tensor(vals, requires_grad=True, dtype=np.float64)
    red = reducer(seed, (1, 1, 4, 4))
    check_op(lambda: red(T.max_pool(x, 2)), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x = p64(rng, 2, 2, 4, 4)
    red = reducer(seed, (2, 2, 2, 2))
    check_op(lambda: red(T.avg_pool(x, 2)), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x = p64(rng, 2, 3, 3, 3)
    red = reducer(seed, (2, 3))
    check_op(lambda: red(T.global_avg_pool(x)), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_residual_add(seed):
    rng = np.random.default_rng(seed)
    a, b = p64(rng, 3, 7), p64(rng, 3, 7)
    red = reducer(seed, (3, 7))
    check_op(lambda: red(T.residual_add(a, b)), {"a": a, "b": b})


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm(seed, training):
    rng = np.random.default_rng(seed)
    x = p64(rng, 4, 2, 3, 3)
    gamma = T.Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True, dtype=np.float64)
    beta = p64(rng, 2)
    rm = rng.normal(size=2)
    rv = rng.uniform(0.5, 2.0, size=2)
    red = reducer(seed, (4, 2, 3, 3))
    # fresh buffer copies per call: the value must not depend on the
    # running-stat side effects of earlier evaluations
    check_op(lambda: red(T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)),
             {"x": x, "gamma": gamma, "beta": beta})


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax(seed):
    rng = np.random.default_rng(seed)
    x = p64(rng, 3, 6)
    red = reducer(seed, (3, 6))
    check_op(lambda: red(T.softmax(x)), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("tau", [0.5, 3.0])
def test_tempered_softmax(seed, tau):
    rng = np.random.default_rng(seed)
    x = p64(rng, 3, 5)
    red = reducer(seed, (3, 5))
    check_op(lambda: red(T.tempered_softmax(x, tau)), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    x = p64(rng, 4, 6)
    labels = rng.integers(0, 6, size=4)
    check_op(lambda: T.cross_entropy(x, labels), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_kl_divergence(seed):
    rng = np.random.default_rng(seed)
    p = T.Tensor(rng.dirichlet(np.ones(5) * 3, size=3), requires_grad=True, dtype=np.float64)
    q = T.Tensor(rng.dirichlet(np.ones(5) * 3, size=3), requires_grad=True, dtype=np.float64)
    # small step keeps the perturbed rows valid distributions
    check_op(lambda: T.kl_divergence(p, q), {"p": p, "q": q}, h=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_distance_sq(seed):
    rng = np.random.default_rng(seed)
    a, b = p64(rng, 2, 9), p64(rng, 2, 9)
    check_op(lambda: T.l2_distance_sq(a, b), {"a": a, "b": b})


@pytest.mark.parametrize("seed", SEEDS)
def test_mul_and_scale(seed):
    rng = np.random.default_rng(seed)
    a, b = p64(rng, 4, 4), p64(rng, 4, 4)
    check_op(lambda: T.scale(T.sum_all(T.mul(a, b)), 0.37), {"a": a, "b": b})


# -- composite losses (the full objective) -----------------------------------


@pytest.mark.parametrize("seed", SEEDS[:10])
def test_kd_loss_composite(seed):
    rng = np.random.default_rng(seed)
    logits = [p64(rng, 2, 4) for _ in range(3)]
    check_op(lambda: losses.kd_loss(logits, tau=3.0, detach_teachers=False),
             {f"lg{i}": lg for i, lg in enumerate(logits)})


@pytest.mark.parametrize("seed", SEEDS[:10])
def test_feature_loss_composite(seed):
    rng = np.random.default_rng(seed)
    feats = [p64(rng, 2, 5) for _ in range(3)]
    check_op(lambda: losses.feature_loss(feats, detach_deepest=False),
             {f"f{i}": f for i, f in enumerate(feats)})


@pytest.mark.parametrize("seed", SEEDS[:10])
def test_total_loss_composite(seed):
    rng = np.random.default_rng(seed)
    logits = [p64(rng, 2, 4) for _ in range(3)]
    feats = [p64(rng, 2, 6) for _ in range(3)]
    labels = rng.integers(0, 4, size=2)
    cfg = losses.LossConfig(alpha=0.4, beta_begin=0.7, beta_end=0.1, tau=2.0,
                            detach_teachers=False)
    check_op(lambda: losses.total_loss(logits, feats, labels, cfg,
                                       epoch=3, total_epochs=10).total_tensor,
             {**{f"lg{i}": lg for i, lg in enumerate(logits)},
              **{f"f{i}": f for i, f in enumerate(feats)}})


@pytest.mark.parametrize("seed", SEEDS[:10])
def test_total_loss_detached_teachers(seed):
    """With detached teachers the gradient equals finite differences of
    the frozen-teacher objective assembled by hand."""
    rng = np.random.default_rng(seed)
    logits = [p64(rng, 2, 3) for _ in range(2)]
    feats = [p64(rng, 2, 4) for _ in range(2)]
    labels = rng.integers(0, 3, size=2)
    cfg = losses.LossConfig(alpha=0.5, beta_begin=0.3, beta_end=0.3, tau=2.0,
                            detach_teachers=True)

    frozen_probs = [T.tempered_softmax(lg.detach(), 2.0).data.copy() for lg in logits]
    frozen_feat = feats[-1].data.copy()

    def frozen_objective():
        l1 = sum(T.cross_entropy(lg, labels).item() for lg in logits)
        l2 = 0.0
        for i in range(2):  # student
            for j in range(2):  # teacher, frozen
                if i == j:
                    continue
                si = T.tempered_softmax(logits[i], 2.0)
                l2 += T.kl_divergence(T.Tensor(frozen_probs[j], dtype=np.float64), si).item()
        l2 *= 4.0  # tau^2, and (N-1) = 1
        l3 = T.l2_distance_sq(feats[0], T.Tensor(frozen_feat, dtype=np.float64)).item()
        return 0.5 * l1 + 0.5 * l2 + 0.3 * l3

    with T.Tape() as tape:
        bd = losses.total_loss(logits, feats, labels, cfg, epoch=0, total_epochs=1)
    T.backward(tape, bd.total_tensor)
    for t in (logits[0], logits[1], feats[0]):
        numeric = finite_diff_grad(frozen_objective, t.data)
        assert_grads_close(t.grad, numeric)
    # the detached deepest feature receives no hint-term gradient
    assert feats[1].grad is None or np.allclose(feats[1].grad, 0.0)
