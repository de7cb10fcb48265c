import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirforge import autodiff as ad

from gradcheck import numeric_grad, rel_error
from primitive_cases import CASES, check_case


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_matches_finite_differences(name):
    for seed in range(3):
        assert check_case(name, seed) < 1e-6


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 5), m=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_composite_mlp_gradient(n, k, m, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((n, k)), rng.standard_normal((k, m)), rng.standard_normal(m)

    def loss_of(w_):
        h = ad.nonlinearity("silu", ad.linear(x, w_, b))
        return ad.tensor_mean(ad.mul(h, h))

    wt = ad.Tensor(w, requires_grad=True)
    ad.backward(loss_of(wt))
    fd = numeric_grad(lambda a: loss_of(ad.Tensor(a)).item(), w)
    assert rel_error(wt.grad, fd) < 1e-6


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.linear(np.ones((2, 3)), np.ones((3, 4)), np.ones(3))


def test_row_broadcast_is_rejected():
    # only equal shapes or a scalar operand are allowed
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones(3))


def test_unknown_nonlinearity():
    with pytest.raises(ValueError, match="unknown nonlinearity"):
        ad.nonlinearity("relu6", np.ones(3))


def test_zero_norm_errors():
    with pytest.raises(ad.DegenerateDirectionError):
        ad.cosine_similarity(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        ad.normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_gradients_accumulate_and_tape_clears():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sq_l2_norm(x))
    ad.backward(ad.sq_l2_norm(x))
    np.testing.assert_allclose(x.grad, 4 * np.array([1.0, 2.0]))
    assert len(ad.get_tape().nodes) == 0


def test_reused_input_sums_paths():
    x = ad.Tensor([3.0], requires_grad=True)
    y = ad.mul(x, x) + ad.scale(x, 2.0)
    ad.backward(ad.tensor_sum(y))
    assert x.grad[0] == pytest.approx(2 * 3.0 + 2.0)


def test_no_grad_records_nothing():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = ad.sq_l2_norm(x)
    assert not y.requires_grad
    assert len(ad.get_tape().nodes) == 0


def test_tape_is_thread_local():
    seen = []

    def worker():
        seen.append(len(ad.get_tape().nodes))

    x = ad.Tensor([1.0], requires_grad=True)
    ad.mul(x, x)
    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert seen == [0]
    ad.get_tape().clear()


def test_sigmoid_family_finite_at_extremes():
    x = np.array([-800.0, -50.0, 0.0, 50.0, 800.0])
    for kind in ("softplus", "silu", "tanh"):
        t = ad.Tensor(x, requires_grad=True)
        ad.backward(ad.tensor_sum(ad.nonlinearity(kind, t)))
        assert np.all(np.isfinite(t.grad))


def test_cosine_clipped_to_unit_interval():
    v = np.array([1e-3, 2e-3, 3e-3])
    assert ad.cosine_similarity(v, v * 7).item() <= 1.0


def test_adamw_single_step_matches_hand_computation():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.1])
    state = ad.AdamState.zeros_like([p])
    (new,), state = ad.adamw_step([p], [g], state, lr=0.1, weight_decay=0.01)
    # first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) (up to eps)
    expect = p - 0.1 * 0.01 * p - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expect, rtol=0, atol=1e-12)
    assert state.step == 1


def test_adamw_rejects_bad_lr_and_leaves_inputs():
    p = np.array([1.0])
    state = ad.AdamState.zeros_like([p])
    with pytest.raises(ValueError):
        ad.adamw_step([p], [p], state, lr=0.0)
    ad.adamw_step([p], [np.array([1.0])], state, lr=0.1)
    assert p[0] == 1.0 and state.step == 0


def test_adamw_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = np.zeros(3)
    state = ad.AdamState.zeros_like([p])
    for _ in range(2000):
        (p,), state = ad.adamw_step([p], [2 * (p - target)], state, lr=0.05, weight_decay=0.0)
    np.testing.assert_allclose(p, target, atol=1e-3)
