import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rope import autodiff as ad
from rope.autodiff import Tape, Tensor

from oracles import numeric_grad, op_cases, op_gradient_error, rel_err

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("kind", sorted(op_cases(np.random.default_rng(0))))
def test_op_gradient_matches_central_differences(kind):
    rng = np.random.default_rng(7)
    inputs, kwargs = op_cases(rng)[kind]
    assert op_gradient_error(kind, inputs, kwargs, rng) < 1e-6


def test_every_registered_op_is_covered():
    assert set(op_cases(np.random.default_rng(0))) == set(ad.OP_KINDS)


def test_add_forward_and_unit_gradients():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        out = ad.add(a, b)
        tape.backward(out.sum())
    np.testing.assert_array_equal(out.data, [4.0, 6.0])
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_matmul_gradient_is_transposed_product():
    A = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    B = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    G = np.ones((2, 4))
    with Tape() as tape:
        tape.backward((A @ B).sum())
    np.testing.assert_allclose(A.grad, G @ B.data.T)
    np.testing.assert_allclose(B.grad, A.data.T @ G)


def test_relu_and_abs_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.relu(x).sum())
    np.testing.assert_array_equal(x.grad, 0.0)
    with Tape() as tape:
        tape.backward(ad.abs_(x).sum())
    np.testing.assert_array_equal(x.grad, 0.0)


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([-1.0]))


def test_exp_overflow_is_domain_error():
    with pytest.raises(ad.DomainError):
        ad.exp(Tensor([1000.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_backward_needs_scalar_loss_on_this_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ad.TapeError):
            tape.backward(y)
    other = Tape()
    with pytest.raises(ad.TapeError):
        other.backward(y.sum())


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad
    with Tape() as tape:
        z = Tensor(np.ones(3)) * 3.0
    assert len(tape) == 0 and not z.requires_grad


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, [5.0])


def test_logsumexp_is_overflow_safe():
    x = Tensor(np.array([[1000.0, 1000.0], [-1000.0, -1000.0]]), requires_grad=True)
    with Tape() as tape:
        out = ad.logsumexp(x, axis=1)
        tape.backward(out.sum())
    np.testing.assert_allclose(out.data, [1000 + np.log(2), -1000 + np.log(2)])
    np.testing.assert_allclose(x.grad, 0.5)


def test_check_finite_flags_nan():
    with pytest.raises(ad.NonFiniteError):
        ad.check_finite(Tensor([1.0, np.nan]))


def test_forward_op_unknown_kind():
    with pytest.raises(ValueError):
        ad.forward_op("conv1d", Tensor([1.0]))


@given(arrays(float, (3, 4), elements=finite), arrays(float, (4,), elements=finite))
def test_broadcast_mul_gradient_property(a, b):
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward((ta * tb).sum())
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))


@given(arrays(float, (5,), elements=finite))
def test_tanh_gradient_property(x):
    t = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.tanh(t).sum())
    num = numeric_grad(lambda: float(np.tanh(t.data).sum()), t.data)
    assert rel_err(t.grad, num) < 1e-6


def test_adam_first_step_moves_by_lr_against_gradient():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    state = ad.AdamState.for_params([p])
    ad.adam_step([p], [np.array([0.5, -2.0])], state, lr=0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_adam_matches_hand_rolled_reference(rng):
    p = Tensor(rng.normal(size=3), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    state = ad.AdamState.for_params([p])
    for t in range(1, 6):
        g = rng.normal(size=3)
        ad.adam_step([p], [g], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_constant_gradient_descends():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = ad.AdamState.for_params([p])
    for _ in range(50):
        ad.adam_step([p], [np.array([1.0])], state, lr=0.01)
    assert p.data[0] < -0.4


def test_adam_errors():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = ad.AdamState.for_params([p])
    with pytest.raises(ValueError):
        ad.adam_step([p], [], state, lr=0.1)
    with pytest.raises(ValueError):
        ad.adam_step([p], [np.zeros(2)], state, lr=0.0)
