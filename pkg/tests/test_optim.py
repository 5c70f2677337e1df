import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relrank import autodiff as ad
from relrank.autodiff import ContractError, Tensor
from relrank.optim import OptimState, ParamGroup, RMSProp, rmsprop_step, zero_grads

FIRST_UPDATE = 0.03162277560168383  # 0.01 / (sqrt(0.1) + 1e-8)
QUADRATIC_STEPS = 514  # scalar simulation: x^2 from 5, lr 0.01, rho 0.9 -> |x| < 0.1


def _param(values, grad):
    p = Tensor(np.array(values, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


def test_zero_gradient_no_change():
    p = _param([1.0, -2.0], [0.0, 0.0])
    cache = [np.zeros(2)]
    rmsprop_step([p], cache, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_update_magnitude():
    p = _param([0.0], [1.0])
    cache = [np.zeros(1)]
    rmsprop_step([p], cache, lr=0.01, rho=0.9, eps=1e-8)
    assert cache[0][0] == pytest.approx(0.1, abs=1e-15)
    assert abs(-p.data[0] - FIRST_UPDATE) < 1e-15


def test_constant_gradient_step_tends_to_lr():
    p = _param([0.0], [0.3])
    cache = [np.zeros(1)]
    for _ in range(500):
        before = p.data[0]
        rmsprop_step([p], cache, lr=0.01)
    assert cache[0][0] == pytest.approx(0.09, rel=1e-12)
    assert before - p.data[0] == pytest.approx(0.01, rel=1e-7)


@settings(max_examples=50, deadline=None)
@given(g=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8))
def test_sign_flip_flips_update(g):
    a, b = _param(np.zeros(len(g)), g), _param(np.zeros(len(g)), -np.array(g))
    rmsprop_step([a], [np.zeros(len(g))], lr=0.01)
    rmsprop_step([b], [np.zeros(len(g))], lr=0.01)
    np.testing.assert_array_equal(a.data, -b.data)


def test_weight_decay_with_zero_gradient():
    p = _param([1.0, -3.0], [0.0, 0.0])
    cache = [np.zeros(2)]
    norm = np.linalg.norm(p.data)
    for _ in range(5):
        before = p.data.copy()
        rmsprop_step([p], cache, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, before * (1 - 0.05), rtol=1e-15)
        assert np.linalg.norm(p.data) < norm
        norm = np.linalg.norm(p.data)


def test_cache_nonnegative_and_shaped(rng):
    p = _param(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    cache = [np.zeros((3, 2))]
    for _ in range(10):
        p.grad = rng.normal(size=(3, 2))
        rmsprop_step([p], cache, lr=0.01)
        assert cache[0].shape == p.data.shape and (cache[0] >= 0).all()


def test_shape_mismatch():
    p = _param([1.0, 2.0], [1.0, 1.0])
    with pytest.raises(ContractError):
        rmsprop_step([p], [np.zeros(3)], lr=0.1)


def test_quadratic_convergence():
    x = Tensor(np.array(5.0), requires_grad=True)
    opt = RMSProp([ParamGroup([x], lr=0.01)], rho=0.9)
    for step in range(1, 2001):
        opt.zero_grad()
        ad.backward(ad.mul(x, x))
        opt.step()
        if abs(x.item()) < 0.1:
            break
    assert step == QUADRATIC_STEPS
    assert opt.state.step == step


def test_zero_grads_semantics():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum(ad.mul(x, x)))
    single = x.grad.copy()
    zero_grads([x])
    assert not x.grad.any()
    zero_grads([x])
    assert not x.grad.any()
    ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, single)


def test_groups_have_own_rates():
    a, b = _param([0.0], [1.0]), _param([0.0], [1.0])
    RMSProp([ParamGroup([a], lr=1e-5), ParamGroup([b], lr=1e-4)]).step()
    assert b.data[0] / a.data[0] == pytest.approx(10.0, rel=1e-6)


def test_group_validation():
    p = _param([0.0], [0.0])
    with pytest.raises(ContractError):
        ParamGroup([p], lr=0.0)
    with pytest.raises(ContractError):
        ParamGroup([p], lr=0.1, weight_decay=-1)
    with pytest.raises(ContractError):
        RMSProp([ParamGroup([p], lr=0.1), ParamGroup([p], lr=0.2)])
    with pytest.raises(ContractError):
        RMSProp([ParamGroup([p], lr=0.1)], state=OptimState([np.zeros(2)], 0))
