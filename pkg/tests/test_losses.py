"""Loss-term exactness, oracles, invariants, and error contracts."""

import math

import numpy as np
import pytest

from suda import autodiff as ad
from suda.autodiff import Tensor, Tape
from suda.errors import (ConfigError, DataError, DegenerateInputError,
                         DimensionError, DomainError, NumericError)
from suda import losses as ls

from gradcheck import check_grads


def rows_sum_one(rng, b, k):
    raw = rng.uniform(0.05, 1.0, size=(b, k))
    return raw / raw.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# supervised


def test_supervised_uniform_is_ln_k():
    probs = np.full((6, 4), 0.25)
    labels = np.array([0, 1, 2, 3, 0, 1])
    out = ls.supervised_loss(probs, labels).item()
    assert out == pytest.approx(math.log(4.0), abs=1e-9)


def test_supervised_onehot_correct_is_zero():
    probs = np.eye(3)[[0, 1, 2, 1]]
    # exact one-hot rows have log(1) = 0 at the picked entries
    out = ls.supervised_loss(probs, np.array([0, 1, 2, 1])).item()
    assert out == 0.0


def test_supervised_matches_brute_force():
    rng = np.random.default_rng(0)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        probs = rows_sum_one(rng, 5, 4)
        labels = rng.integers(0, 4, size=5)
        out = ls.supervised_loss(probs, labels).item()
        oracle = float(np.mean([-math.log(probs[i, labels[i]]) for i in range(5)]))
        assert out == pytest.approx(oracle, abs=1e-12)


def test_supervised_is_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        probs = rows_sum_one(rng, 4, 5)
        labels = rng.integers(0, 5, size=4)
        assert ls.supervised_loss(probs, labels).item() >= 0.0


def test_supervised_label_errors():
    probs = np.full((2, 3), 1.0 / 3.0)
    with pytest.raises(DataError):
        ls.supervised_loss(probs, np.array([0, 3]))
    with pytest.raises(DataError):
        ls.supervised_loss(probs, np.array([-1, 0]))
    with pytest.raises(DataError):
        ls.supervised_loss(probs, np.array([0.5, 1.0]))
    with pytest.raises(DataError):
        ls.supervised_loss(probs, np.array([0]))


# ---------------------------------------------------------------------------
# adversarial


def test_adversarial_half_scores():
    half = np.full(8, 0.5)
    out = ls.adversarial_loss(half, half).item()
    assert out == pytest.approx(2.0 * math.log(0.5), abs=1e-9)


def test_adversarial_perfect_discriminator_near_zero():
    eps = 1e-9
    out = ls.adversarial_loss(np.full(4, 1.0 - eps), np.full(4, eps)).item()
    assert out == pytest.approx(0.0, abs=1e-8)
    assert out <= 0.0


def test_adversarial_matches_brute_force():
    rng = np.random.default_rng(1)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        src = rng.uniform(0.01, 0.99, size=6)
        tgt = rng.uniform(0.01, 0.99, size=4)
        out = ls.adversarial_loss(src, tgt).item()
        oracle = float(np.mean(np.log(src)) + np.mean(np.log(1.0 - tgt)))
        assert out == pytest.approx(oracle, abs=1e-12)


def test_adversarial_monotone_grid():
    # payoff strictly increases as src scores rise and tgt scores fall
    tgt = np.full(3, 0.4)
    values = [ls.adversarial_loss(np.full(3, s), tgt).item()
              for s in (0.2, 0.4, 0.6, 0.8)]
    assert all(a < b for a, b in zip(values, values[1:]))
    src = np.full(3, 0.6)
    values = [ls.adversarial_loss(src, np.full(3, t)).item()
              for t in (0.8, 0.6, 0.4, 0.2)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_adversarial_domain_errors():
    good = np.full(2, 0.5)
    for bad in (np.array([0.0, 0.5]), np.array([1.0, 0.5]), np.array([1.2, 0.5])):
        with pytest.raises(DomainError):
            ls.adversarial_loss(bad, good)
        with pytest.raises(DomainError):
            ls.adversarial_loss(good, bad)


def test_adversarial_from_logits_matches_score_route():
    rng = np.random.default_rng(7)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        src_z = rng.normal(size=5) * 3.0
        tgt_z = rng.normal(size=5) * 3.0
        via_logits = ls.adversarial_loss_from_logits(Tensor(src_z), Tensor(tgt_z)).item()
        sigmoid = lambda z: 1.0 / (1.0 + np.exp(-z))
        via_scores = ls.adversarial_loss(sigmoid(src_z), sigmoid(tgt_z)).item()
        assert via_logits == pytest.approx(via_scores, abs=1e-12)
    # and survives saturation that would break the score route
    out = ls.adversarial_loss_from_logits(Tensor(np.array([900.0])),
                                          Tensor(np.array([-900.0]))).item()
    assert math.isfinite(out) and out == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# discrepancy


def test_discrepancy_exact_cases():
    theta = np.array([1.0, -2.0, 3.0])
    assert ls.discrepancy_loss(theta, theta).item() == pytest.approx(1.0, abs=1e-9)
    assert ls.discrepancy_loss(theta, -theta).item() == pytest.approx(-1.0, abs=1e-9)
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 5.0])
    assert ls.discrepancy_loss(a, b).item() == pytest.approx(0.0, abs=1e-12)


def test_discrepancy_rescale_invariance():
    rng = np.random.default_rng(2)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        t1 = rng.normal(size=20)
        t2 = rng.normal(size=20)
        base = ls.discrepancy_loss(t1, t2).item()
        scaled = ls.discrepancy_loss(3.7 * t1, 0.2 * t2).item()
        assert scaled == pytest.approx(base, abs=1e-12)
        assert -1.0 - 1e-12 <= base <= 1.0 + 1e-12


def test_discrepancy_zero_vector_raises():
    with pytest.raises(DegenerateInputError):
        ls.discrepancy_loss(np.zeros(4), np.ones(4))
    with pytest.raises(DegenerateInputError):
        ls.discrepancy_loss(np.ones(4), np.zeros(4))
    with pytest.raises(DimensionError):
        ls.discrepancy_loss(np.ones(4), np.ones(5))


# ---------------------------------------------------------------------------
# similarity


def test_similarity_exact_cases():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert ls.similarity_loss(p, p).item() == 0.0
    p1 = np.array([[1.0, 0.0]])
    p2 = np.array([[0.0, 1.0]])
    assert ls.similarity_loss(p1, p2).item() == pytest.approx(math.sqrt(2.0), abs=1e-9)


def test_similarity_matches_brute_force():
    rng = np.random.default_rng(5)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p1 = rows_sum_one(rng, 6, 3)
        p2 = rows_sum_one(rng, 6, 3)
        out = ls.similarity_loss(p1, p2).item()
        oracle = float(np.mean(np.linalg.norm(p1 - p2, axis=1)))
        assert out == pytest.approx(oracle, abs=1e-12)


def test_similarity_symmetric_and_nonnegative():
    rng = np.random.default_rng(6)
    p1 = rows_sum_one(rng, 4, 4)
    p2 = rows_sum_one(rng, 4, 4)
    a = ls.similarity_loss(p1, p2).item()
    b = ls.similarity_loss(p2, p1).item()
    assert a == pytest.approx(b, abs=1e-15)
    assert a > 0.0
    with pytest.raises(DimensionError):
        ls.similarity_loss(p1, rows_sum_one(rng, 3, 4))


# ---------------------------------------------------------------------------
# combined objective


def test_total_objective_degenerate_weights():
    parts = dict(l_sup=1.7, l_adv=-0.4, l_dis=0.3, l_sim=0.2)
    out = ls.total_objective(**parts, weights=ls.LossWeights(lambda_c=0.0, lambda_s=0.0))
    assert out.total == parts["l_sup"]
    zero = ls.total_objective(0.0, 0.0, 0.0, 0.0, ls.LossWeights())
    assert zero.total == 0.0 and zero.l_self == 0.0


def test_total_objective_identity_randomized():
    rng = np.random.default_rng(8)
    for _ in range(50):
        l_sup, l_adv, l_dis, l_sim = rng.normal(size=4)
        w = ls.LossWeights(lambda_c=float(rng.uniform(0, 2)),
                           lambda_s=float(rng.uniform(0, 2)))
        out = ls.total_objective(l_sup, l_adv, l_dis, l_sim, w)
        assert out.l_self == pytest.approx(out.l_dis + out.l_sim, abs=1e-12)
        expected = out.l_sup - w.lambda_c * out.l_adv + w.lambda_s * out.l_self
        assert out.total == pytest.approx(expected, abs=1e-12)


def test_total_objective_rejects_non_finite():
    with pytest.raises(NumericError):
        ls.total_objective(float("nan"), 0.0, 0.0, 0.0, ls.LossWeights())
    with pytest.raises(NumericError):
        ls.total_objective(0.0, float("inf"), 0.0, 0.0, ls.LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        ls.LossWeights(lambda_c=-0.1)
    with pytest.raises(ConfigError):
        ls.LossWeights(lambda_s=float("nan"))


def test_self_supervision_sub_weights():
    l_dis = Tensor(np.array(0.5))
    l_sim = Tensor(np.array(0.25))
    assert ls.self_supervision_loss(l_dis, l_sim).item() == pytest.approx(0.75)
    assert ls.self_supervision_loss(l_dis, l_sim, dis_weight=0.0).item() == \
        pytest.approx(0.25)


# ---------------------------------------------------------------------------
# gradients through the losses


@pytest.mark.parametrize("seed", range(20))
def test_fd_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    probs = rows_sum_one(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)

    def sup(arrs):
        return float(ls.supervised_loss(Tensor(arrs[0]), labels).data)

    tape = Tape()
    p = tape.watch(Tensor(probs))
    g = ad.backward(tape, ls.supervised_loss(p, labels))[p.nid].data
    check_grads(sup, [probs], g, 0)

    src = rng.uniform(0.1, 0.9, size=5)
    tgt = rng.uniform(0.1, 0.9, size=5)

    def adv(arrs):
        return float(ls.adversarial_loss(Tensor(arrs[0]), Tensor(arrs[1])).data)

    tape = Tape()
    s = tape.watch(Tensor(src))
    t = tape.watch(Tensor(tgt))
    grads = ad.backward(tape, ls.adversarial_loss(s, t))
    check_grads(adv, [src, tgt], grads[s.nid].data, 0)
    check_grads(adv, [src, tgt], grads[t.nid].data, 1)

    t1 = rng.normal(size=12)
    t2 = rng.normal(size=12)

    def dis(arrs):
        return float(ls.discrepancy_loss(Tensor(arrs[0]), Tensor(arrs[1])).data)

    tape = Tape()
    a = tape.watch(Tensor(t1))
    b = tape.watch(Tensor(t2))
    grads = ad.backward(tape, ls.discrepancy_loss(a, b))
    check_grads(dis, [t1, t2], grads[a.nid].data, 0)
    check_grads(dis, [t1, t2], grads[b.nid].data, 1)

    p1 = rows_sum_one(rng, 3, 4)
    p2 = rows_sum_one(rng, 3, 4)

    def sim(arrs):
        return float(ls.similarity_loss(Tensor(arrs[0]), Tensor(arrs[1])).data)

    tape = Tape()
    a = tape.watch(Tensor(p1))
    b = tape.watch(Tensor(p2))
    grads = ad.backward(tape, ls.similarity_loss(a, b))
    check_grads(sim, [p1, p2], grads[a.nid].data, 0)
    check_grads(sim, [p1, p2], grads[b.nid].data, 1)
