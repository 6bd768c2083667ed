import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import OP_CASES, op_error
from klal import tensor as T
from klal.tensor import GraphError, Tensor


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    worst = max(op_error(name, seed) for seed in range(20))
    assert worst < 1e-4


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradient_shapes():
    a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.ones((3, 1)), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (3, 1)
    np.testing.assert_allclose(b.grad, np.full((3, 1), 8.0))


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_backward_without_grad_leaf():
    with pytest.raises(GraphError):
        T.backward(Tensor(np.ones(3)).sum())


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert y._parents == ()


def test_deep_chain_has_no_recursion_limit():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    y.backward()
    assert x.grad == 1.0


def test_masked_softmax_gives_exact_zeros():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 5)))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    out = T.softmax_rows(x, mask).data
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_survives_huge_logits():
    out = T.softmax_rows(Tensor(np.array([[1e308, 0.0, -1e308]]))).data
    assert np.isfinite(out).all()
    assert out[0, 0] == 1.0


def test_cross_entropy_of_uniform_logits():
    v = 17
    loss = T.cross_entropy_logits(Tensor(np.zeros((3, v))), np.array([0, 5, 16]))
    assert abs(loss.item() - math.log(v)) < 1e-12


def test_cross_entropy_ignores_masked_positions():
    logits = np.random.default_rng(1).normal(size=(4, 6))
    targets = np.array([1, 2, 3, 4])
    mask = np.array([True, False, True, False])
    full = T.cross_entropy_logits(Tensor(logits[mask]), targets[mask]).item()
    masked = T.cross_entropy_logits(Tensor(logits), targets, mask).item()
    assert masked == pytest.approx(full, abs=1e-14)


def test_cross_entropy_all_masked_raises():
    with pytest.raises(ValueError):
        T.cross_entropy_logits(Tensor(np.zeros((2, 4))), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))


def test_kl_closed_form():
    kl = T.kl_divergence(np.array([1.0, 0.0]), Tensor(np.array([0.5, 0.5])))
    assert abs(kl.item() - math.log(2)) < 1e-12


def test_kl_of_identical_distributions_is_zero():
    p = np.array([0.1, 0.2, 0.7])
    assert T.kl_divergence(p, Tensor(p.copy())).item() == 0.0


def test_kl_clamps_zero_q():
    kl = T.kl_divergence(np.array([0.5, 0.5]), Tensor(np.array([1.0, 0.0]), requires_grad=True))
    assert np.isfinite(kl.item())
    assert kl.item() == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / T.KL_CLAMP))


def test_kl_keeps_leading_axes():
    q = np.full((3, 2, 4), 0.25)
    assert T.kl_divergence(np.full(4, 0.25), Tensor(q)).shape == (3, 2)


def test_parameters_finite():
    a = Tensor(np.ones(2), requires_grad=True)
    a.grad = np.array([1.0, np.nan])
    assert not T.parameters_finite([a])
    a.grad = np.array([1.0, 2.0])
    assert T.parameters_finite([a])


def test_graph_trace_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    z = (y + x).sum()
    order = [n.node_id for n in T.Graph.trace(z).nodes]
    assert order.index(x.node_id) < order.index(y.node_id) < order.index(z.node_id)


def test_sum_gives_all_ones():
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_fan_out_doubles():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_unreached_parameter_keeps_zero_gradient():
    # None is the engine's zero gradient
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    (x * 2.0).sum().backward()
    assert unused.grad is None


@pytest.mark.parametrize("seed", range(5))
def test_softmax_invariant_to_row_shift(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    shift = rng.normal(size=(4, 1)) * 50
    a = T.softmax_rows(Tensor(x)).data
    b = T.softmax_rows(Tensor(x + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


_simplex_raw = arrays(np.float64, 6, elements=st.floats(0.0, 1.0)).filter(lambda a: a.sum() > 1e-3)


@settings(max_examples=200, deadline=None)
@given(_simplex_raw, _simplex_raw)
def test_kl_nonnegative(p, q):
    p, q = p / p.sum(), q / q.sum()
    assert T.kl_divergence(p, Tensor(q)).item() >= -1e-12
