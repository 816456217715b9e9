import math
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionshift import diffcore as dc
from motionshift import losses


def loop_task_loss(y_hat, y):
    total, n = 0.0, 0
    for b in range(y.shape[0]):
        for t in range(y.shape[1]):
            total += sum((y_hat[b, t, k] - y[b, t, k]) ** 2 for k in range(y.shape[2]))
            n += 1
    return total / n


def loop_contrastive(p, labels, tau):
    n = len(labels)
    unit = [p[i] / math.sqrt(sum(v * v for v in p[i])) for i in range(n)]

    def sim(i, j):
        return float(sum(a * b for a, b in zip(unit[i], unit[j])))

    terms = []
    for i in range(n):
        for j in range(n):
            if i == j or labels[i] != labels[j]:
                continue
            denom = 0.0
            for k in range(n):
                if k == j or labels[k] != labels[i]:
                    denom += math.exp(sim(i, k) / tau)
            terms.append(-math.log(math.exp(sim(i, j) / tau) / denom))
    return sum(terms) / len(terms)


def test_task_loss_zero_at_target(rng):
    y = rng.normal(size=(4, 12, 2))
    assert losses.task_loss(y, y).item() == 0.0


def test_task_loss_constant_offset():
    y = np.zeros((3, 12, 2))
    assert losses.task_loss(y + np.array([3.0, 4.0]), y).item() == pytest.approx(25.0, abs=1e-12)


def test_task_loss_matches_loop(rng):
    y_hat, y = rng.normal(size=(5, 12, 2)), rng.normal(size=(5, 12, 2))
    assert abs(losses.task_loss(y_hat, y).item() - loop_task_loss(y_hat, y)) < 1e-12


def test_task_loss_errors():
    with pytest.raises(losses.LossError):
        losses.task_loss(np.zeros((0, 12, 2)), np.zeros((0, 12, 2)))
    with pytest.raises(losses.LossError):
        losses.task_loss(np.zeros((2, 12, 2)), np.zeros((3, 12, 2)))


def test_penalty_zero_at_optimum(rng):
    y = rng.normal(size=(6, 12, 2))
    assert losses.invariant_penalty(y, y).item() == 0.0


def test_penalty_hand_case():
    length = 7
    y = np.ones((length, 1))
    assert losses.invariant_penalty(2 * y, y).item() == pytest.approx(16.0, abs=1e-12)


def fd_penalty(y_hat, y, step=1e-6):
    def risk(w):
        return losses.task_loss(w * y_hat, y).item()

    return ((risk(1 + step) - risk(1 - step)) / (2 * step)) ** 2


@pytest.mark.parametrize("seed", range(5))
def test_penalty_matches_finite_difference_on_scale(seed):
    rng = np.random.default_rng(seed)
    y_hat, y = rng.normal(size=(8, 12, 2)), rng.normal(size=(8, 12, 2))
    value = losses.invariant_penalty(y_hat, y).item()
    assert abs(value - fd_penalty(y_hat, y)) / value < 1e-4


def loop_penalty(y_hat, y):
    n = y.shape[0] * y.shape[1]
    s = sum(float(np.dot(y_hat[b, t], y_hat[b, t] - y[b, t])) for b in range(y.shape[0]) for t in range(y.shape[1]))
    return (2.0 / n * s) ** 2


def test_penalty_matches_loop(rng):
    y_hat, y = rng.normal(size=(9, 12, 2)), rng.normal(size=(9, 12, 2))
    assert abs(losses.invariant_penalty(y_hat, y).item() - loop_penalty(y_hat, y)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_penalty_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    y_hat, y = rng.normal(size=(7, 12, 2)), rng.normal(size=(7, 12, 2))
    perm = rng.permutation(7)
    a = losses.invariant_penalty(y_hat, y).item()
    b = losses.invariant_penalty(y_hat[perm], y[perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_combined_lambda_zero_is_mean_env_risk(rng):
    batches = [(rng.normal(size=(4, 12, 2)), rng.normal(size=(4, 12, 2))) for _ in range(3)]
    erm = np.mean([loop_task_loss(a, b) for a, b in batches])
    assert abs(losses.combined_invariant_objective(batches, 0.0).item() - erm) < 1e-12


def test_combined_identical_envs(rng):
    pair = (rng.normal(size=(4, 12, 2)), rng.normal(size=(4, 12, 2)))
    lam = 3.0
    single = losses.task_loss(*pair).item() + lam * losses.invariant_penalty(*pair).item()
    assert losses.combined_invariant_objective([pair, pair], lam).item() == pytest.approx(single, rel=1e-12)


def test_combined_rejects_negative_lambda(rng):
    pair = (np.zeros((1, 12, 2)), np.zeros((1, 12, 2)))
    with pytest.raises(losses.LossError):
        losses.combined_invariant_objective([pair, pair], -1.0)


def test_combined_warns_single_env():
    pair = (np.zeros((1, 12, 2)), np.ones((1, 12, 2)))
    with pytest.warns(UserWarning):
        losses.combined_invariant_objective([pair], 1.0)


def test_contrastive_hand_case_one_negative():
    # identical anchor/positive plus a single orthogonal negative, tau = 1
    p = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    value = losses.contrastive_from_pairs(p, [0], [1], [[False, True, True]], tau=1.0).item()
    assert abs(value - math.log1p(math.exp(-1))) < 1e-9
    assert value == pytest.approx(0.3133, abs=5e-5)


def test_contrastive_full_batch_hand_value():
    # a valid batch needs two samples per environment, so each anchor sees two negatives
    p = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    value = losses.style_contrastive(p, ["a", "a", "b", "b"], tau=1.0).item()
    assert value == pytest.approx(math.log1p(2 * math.exp(-1)), abs=1e-12)


def test_contrastive_pair_enumeration():
    anchors, positives, mask = losses.contrastive_pairs(["a", "a", "b", "b", "b"])
    assert len(anchors) == 2 + 6
    for i, j, m in zip(anchors, positives, mask):
        assert m[j] and not m[i]
        assert m.sum() == 1 + (3 if i < 2 else 2)


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(6, 4))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    labels = [0, 0, 1, 1, 2, 2]
    value = losses.style_contrastive(p, labels, tau=0.1).item()
    assert abs(value - loop_contrastive(p, labels, 0.1)) < 1e-12


def test_contrastive_sharper_temperature_lowers_loss():
    p = np.array([[1.0, 0.0], [0.95, 0.31], [0.0, 1.0], [-0.2, 0.98]])
    labels = [0, 0, 1, 1]
    assert losses.style_contrastive(p, labels, tau=0.05).item() < losses.style_contrastive(p, labels, tau=0.5).item()


def test_contrastive_errors():
    with pytest.raises(losses.LossError, match="no positive"):
        losses.style_contrastive(np.eye(3), [0, 0, 1])
    with pytest.raises(losses.LossError, match="no negative"):
        losses.style_contrastive(np.eye(2), [0, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_contrastive_nonnegative_and_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(6, 3))
    labels = [0, 1, 2, 0, 1, 2]
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = losses.style_contrastive(p, labels, tau=0.2).item()
    b = losses.style_contrastive(p @ q, labels, tau=0.2).item()
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-10)


def test_contrastive_gradient_matches_finite_differences(rng):
    from conftest import autodiff_grad, central_difference, rel_error

    labels = [0, 0, 1, 1, 2, 2]
    x0 = rng.normal(size=(6, 3))

    def build(v):
        return losses.style_contrastive(v, labels, tau=0.3)

    num = central_difference(lambda a: build(dc.Value(a)).item(), x0)
    assert rel_error(autodiff_grad(build, x0), num) < 1e-5


def test_penalty_gradient_matches_finite_differences(rng):
    from conftest import autodiff_grad, central_difference, rel_error

    y = rng.normal(size=(3, 12, 2))
    x0 = rng.normal(size=(3, 12, 2))
    num = central_difference(lambda a: losses.invariant_penalty(a, y).item(), x0, step=1e-6)
    assert rel_error(autodiff_grad(lambda v: losses.invariant_penalty(v, y), x0), num) < 1e-5
