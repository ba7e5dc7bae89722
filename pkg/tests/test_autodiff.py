"""Unit tests for the reverse-mode core.

Every differentiable op is checked against the central finite-difference
oracle over many seeds; exact values use hand-computed expectations.
"""

import numpy as np
import pytest

from suda import autodiff as ad
from suda.autodiff import Tensor, Tape
from suda.errors import ContractError, DimensionError, DomainError

from gradcheck import check_grads

N_SEEDS = 20


def _rng(seed):
    return np.random.default_rng(seed)


def _scalar_through(op_builder, arrays, which):
    """Builds f(arrays) -> float where the op output is folded to a scalar
    by a fixed weighted sum, so gradients of every output entry matter."""
    def f(arrs):
        out = op_builder([Tensor(a) for a in arrs])
        w = _probe_weights(out.data.shape)
        return float(np.sum(out.data * w))
    return f


def _probe_weights(shape):
    n = int(np.prod(shape)) if shape else 1
    return (np.linspace(0.3, 1.7, n)).reshape(shape)


def _grad_of(op_builder, arrays, which):
    tape = Tape()
    taped = [tape.watch(Tensor(a)) for a in arrays]
    out = op_builder(taped)
    w = _probe_weights(out.data.shape)
    root = ad.reduce_sum(ad.mul(out, Tensor(w)))
    grads = ad.backward(tape, root)
    return grads[taped[which].nid].data


def _check_op(op_builder, arrays, seeds_note=""):
    for which in range(len(arrays)):
        analytic = _grad_of(op_builder, arrays, which)
        check_grads(_scalar_through(op_builder, arrays, which), arrays, analytic, which)


# ---------------------------------------------------------------------------
# exact behaviour


def test_matmul_identity_and_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    eye = np.eye(2)
    out = ad.matmul(Tensor(a), Tensor(eye))
    assert np.array_equal(out.data, a)
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = ad.matmul(Tensor(a), Tensor(b))
    assert np.array_equal(out.data, a @ b)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_softmax_exact_values():
    out = ad.softmax(Tensor(np.array([0.0, 0.0])), axis=0)
    assert np.array_equal(out.data, np.array([0.5, 0.5]))
    out = ad.softmax(Tensor(np.array([1000.0, 0.0])), axis=0)
    assert out.data[0] == pytest.approx(1.0, abs=1e-300)
    assert out.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_sum_to_one():
    for seed in range(N_SEEDS):
        x = _rng(seed).normal(size=(4, 7)) * 10.0
        out = ad.softmax(Tensor(x), axis=1)
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-12)


def test_softmax_gradient_of_sum_is_zero():
    # sum of softmax is constant 1 per row, so the gradient must vanish
    tape = Tape()
    x = tape.watch(Tensor(_rng(0).normal(size=(3, 5))))
    root = ad.reduce_sum(ad.softmax(x, axis=1))
    g = ad.backward(tape, root)[x.nid].data
    assert np.all(np.abs(g) < 1e-12)


def test_sigmoid_exact():
    out = ad.sigmoid(Tensor(np.array([0.0])))
    assert out.data[0] == 0.5
    tape = Tape()
    x = tape.watch(Tensor(np.array([0.0])))
    g = ad.backward(tape, ad.reduce_sum(ad.sigmoid(x)))[x.nid].data
    assert g[0] == pytest.approx(0.25, abs=1e-15)


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        ad.log(Tensor(np.array([-1.0])))


def test_sqrt_domain_and_zero_subgradient():
    with pytest.raises(DomainError):
        ad.sqrt(Tensor(np.array([-1e-9])))
    tape = Tape()
    x = tape.watch(Tensor(np.array([0.0, 4.0])))
    g = ad.backward(tape, ad.reduce_sum(ad.sqrt(x)))[x.nid].data
    assert g[0] == 0.0
    assert g[1] == pytest.approx(0.25, rel=1e-12)


def test_log_sigmoid_matches_log_of_sigmoid():
    x = _rng(3).normal(size=(30,)) * 5.0
    a = ad.log_sigmoid(Tensor(x)).data
    b = np.log(ad.sigmoid(Tensor(x)).data)
    assert np.all(np.abs(a - b) < 1e-12)
    # stays finite where naive log(sigmoid) underflows
    out = ad.log_sigmoid(Tensor(np.array([-800.0]))).data
    assert np.isfinite(out[0]) and out[0] == pytest.approx(-800.0, rel=1e-12)


def test_scalar_operand_broadcast():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.add(Tensor(a), 1.5)
    assert np.array_equal(out.data, a + 1.5)
    out = ad.sub(2.0, Tensor(a))
    assert np.array_equal(out.data, 2.0 - a)
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3,))))


def test_reduce_exact():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert ad.reduce_sum(Tensor(x)).item() == 10.0
    assert ad.reduce_mean(Tensor(x)).item() == 2.5
    assert ad.reduce_max(Tensor(x)).item() == 4.0
    assert np.array_equal(ad.reduce_sum(Tensor(x), axes=0).data, np.array([4.0, 6.0]))
    assert np.array_equal(ad.reduce_mean(Tensor(x), axes=(1,)).data, np.array([1.5, 3.5]))


def test_reduce_mean_gradient_is_uniform():
    tape = Tape()
    x = tape.watch(Tensor(_rng(1).normal(size=(4, 6))))
    g = ad.backward(tape, ad.reduce_mean(x))[x.nid].data
    assert np.all(np.abs(g - 1.0 / 24.0) < 1e-15)


def test_concat_and_narrow_roundtrip():
    a = _rng(5).normal(size=(2, 3))
    b = _rng(6).normal(size=(2, 4))
    cat = ad.concat([Tensor(a), Tensor(b)], axis=1)
    assert cat.data.shape == (2, 7)
    back_a = ad.narrow(cat, 1, 0, 3)
    back_b = ad.narrow(cat, 1, 3, 4)
    assert np.array_equal(back_a.data, a)
    assert np.array_equal(back_b.data, b)
    with pytest.raises(DimensionError):
        ad.concat([Tensor(a), Tensor(np.zeros((3, 3)))], axis=1)


def test_reshape_expand_transpose_exact():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ad.reshape(Tensor(x), (3, 2)).data, x.reshape(3, 2))
    with pytest.raises(DimensionError):
        ad.reshape(Tensor(x), (4, 2))
    e = ad.expand(Tensor(np.array([[1.0], [2.0]])), (2, 3))
    assert np.array_equal(e.data, np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]))
    with pytest.raises(DimensionError):
        ad.expand(Tensor(x), (2, 5))
    t = ad.transpose(Tensor(x), (1, 0))
    assert np.array_equal(t.data, x.T)


# ---------------------------------------------------------------------------
# finite-difference checks, 20 seeds each


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_matmul(seed):
    rng = _rng(seed)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    _check_op(lambda ts: ad.matmul(ts[0], ts[1]), arrays)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_elementwise_binary(seed):
    rng = _rng(seed)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))
    _check_op(lambda ts: ad.add(ts[0], ts[1]), [a, b])
    _check_op(lambda ts: ad.sub(ts[0], ts[1]), [a, b])
    _check_op(lambda ts: ad.mul(ts[0], ts[1]), [a, b])
    _check_op(lambda ts: ad.div(ts[0], ts[1]), [a, b + 3.0 * np.sign(b) + 0.5])
    # scalar operand route
    s = np.array(rng.normal())
    _check_op(lambda ts: ad.mul(ts[0], ts[1]), [a, s])


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_elementwise_unary(seed):
    rng = _rng(seed)
    x = rng.normal(size=(2, 5))
    pos = np.abs(x) + 0.2
    _check_op(lambda ts: ad.sigmoid(ts[0]), [x])
    _check_op(lambda ts: ad.log_sigmoid(ts[0]), [x])
    _check_op(lambda ts: ad.log(ts[0]), [pos])
    _check_op(lambda ts: ad.square(ts[0]), [x])
    _check_op(lambda ts: ad.sqrt(ts[0]), [pos])
    _check_op(lambda ts: ad.scale(ts[0], 0.37), [x])
    # keep samples away from the relu kink where the derivative jumps
    away = x + 0.25 * np.sign(x) + 0.01
    _check_op(lambda ts: ad.relu(ts[0]), [away])


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_softmax(seed):
    x = _rng(seed).normal(size=(3, 4)) * 2.0
    _check_op(lambda ts: ad.softmax(ts[0], axis=1), [x])


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_reductions(seed):
    rng = _rng(seed)
    x = rng.normal(size=(3, 4))
    _check_op(lambda ts: ad.reduce_sum(ts[0], axes=1), [x])
    _check_op(lambda ts: ad.reduce_mean(ts[0], axes=(0,)), [x])
    _check_op(lambda ts: ad.reduce_sum(ts[0]), [x])
    # perturbations of 1e-5 must not change the argmax
    spread = x + 10.0 * np.arange(12.0).reshape(3, 4)
    _check_op(lambda ts: ad.reduce_max(ts[0], axes=1), [spread])


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_shape_ops(seed):
    rng = _rng(seed)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))
    _check_op(lambda ts: ad.concat([ts[0], ts[1]], axis=1), [a, b])
    _check_op(lambda ts: ad.narrow(ts[0], 1, 1, 2), [a])
    _check_op(lambda ts: ad.reshape(ts[0], (6,)), [a])
    _check_op(lambda ts: ad.expand(ts[0], (4, 3)), [rng.normal(size=(1, 3))])
    _check_op(lambda ts: ad.transpose(ts[0], (1, 0)), [a])


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_fd_composite_chain(seed):
    # a small MLP-like chain exercising op composition on one tape
    rng = _rng(seed)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=(1, 2))

    def build(ts):
        h = ad.sigmoid(ad.add(ad.matmul(ts[0], ts[1]), ad.expand(ts[2], (4, 2))))
        return ad.reduce_mean(ad.square(h))

    _check_op(build, [x, w, b])


# ---------------------------------------------------------------------------
# tape semantics


def test_backward_untouched_leaf_gets_zeros():
    tape = Tape()
    x = tape.watch(Tensor(np.ones((2, 2))))
    unused = tape.watch(Tensor(np.ones((3,))))
    root = ad.reduce_sum(x)
    grads = ad.backward(tape, root)
    assert np.array_equal(grads[x.nid].data, np.ones((2, 2)))
    assert np.array_equal(grads[unused.nid].data, np.zeros((3,)))


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.watch(Tensor(np.ones((2, 2))))
    y = ad.square(x)
    with pytest.raises(ContractError):
        ad.backward(tape, y)


def test_backward_root_must_belong_to_tape():
    tape = Tape()
    tape.watch(Tensor(np.ones(2)))
    with pytest.raises(ContractError):
        ad.backward(tape, Tensor(np.array(1.0)))


def test_mixing_tapes_is_an_error():
    t1, t2 = Tape(), Tape()
    a = t1.watch(Tensor(np.ones(2)))
    b = t2.watch(Tensor(np.ones(2)))
    with pytest.raises(ContractError):
        ad.add(a, b)


def test_backward_preserves_forward_values_and_repeats():
    tape = Tape()
    x = tape.watch(Tensor(np.array([1.0, 2.0, 3.0])))
    y = ad.square(x)
    root = ad.reduce_sum(y)
    before = y.data.copy()
    g1 = ad.backward(tape, root)[x.nid].data.copy()
    g2 = ad.backward(tape, root)[x.nid].data
    assert np.array_equal(y.data, before)
    assert np.array_equal(g1, g2)


def test_reused_tensor_accumulates_gradient():
    tape = Tape()
    x = tape.watch(Tensor(np.array([3.0])))
    root = ad.reduce_sum(ad.mul(x, x))
    g = ad.backward(tape, root)[x.nid].data
    assert g[0] == pytest.approx(6.0, rel=1e-12)


def test_constants_do_not_record():
    tape = Tape()
    x = tape.watch(Tensor(np.ones(3)))
    before = tape.num_ops
    ad.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))  # constants only
    assert tape.num_ops == before
    out = ad.mul(x, Tensor(np.full(3, 2.0)))
    assert tape.num_ops == before + 1
    assert out.tape is tape


def test_gradients_are_deterministic():
    def run():
        tape = Tape()
        x = tape.watch(Tensor(np.linspace(-1, 1, 12).reshape(3, 4)))
        w = tape.watch(Tensor(np.linspace(0.1, 0.9, 8).reshape(4, 2)))
        root = ad.reduce_mean(ad.square(ad.softmax(ad.matmul(x, w), axis=1)))
        grads = ad.backward(tape, root)
        return grads[x.nid].data.tobytes(), grads[w.nid].data.tobytes()

    assert run() == run()


def test_custom_op_records_adjoint():
    # doubling with a hand-written adjoint behaves like scale(x, 2)
    tape = Tape()
    x = tape.watch(Tensor(np.arange(4.0)))
    out = ad.custom_op([x], x.data * 2.0, lambda g: (g * 2.0,))
    g = ad.backward(tape, ad.reduce_sum(out))[x.nid].data
    assert np.array_equal(g, np.full(4, 2.0))


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_zero_lr_is_noop():
    p = Tensor(np.array([1.0, 2.0]))
    opt = ad.SgdMomentum(lr=0.0, momentum=0.9)
    opt.step([("p", p)], {"p": np.array([5.0, 5.0])})
    assert np.array_equal(p.data, np.array([1.0, 2.0]))


def test_sgd_first_step_is_minus_lr_grad():
    p = Tensor(np.array([1.0, 2.0]))
    opt = ad.SgdMomentum(lr=0.1, momentum=0.9)
    opt.step([("p", p)], {"p": np.array([1.0, -2.0])})
    assert np.allclose(p.data, np.array([0.9, 2.2]), rtol=0, atol=1e-15)


def test_sgd_momentum_accumulates():
    # two steps with constant gradient g: p2 = p0 - lr*(g + (1+mu)*g)
    p = Tensor(np.array([0.0]))
    g = {"p": np.array([1.0])}
    opt = ad.SgdMomentum(lr=1.0, momentum=0.5)
    opt.step([("p", p)], g)
    opt.step([("p", p)], g)
    assert p.data[0] == pytest.approx(-(1.0 + 1.5), rel=1e-15)


def test_sgd_shape_mismatch():
    p = Tensor(np.zeros((2, 2)))
    opt = ad.SgdMomentum(lr=0.1)
    with pytest.raises(DimensionError):
        opt.step([("p", p)], {"p": np.zeros(3)})
