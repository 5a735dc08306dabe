import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salmod.tensor import (
    GraphError,
    Node,
    Tensor,
    TensorError,
    add,
    backward,
    constant,
    default_dtype,
    fast_mode,
    leaf,
    mul,
    reshape,
    scale,
    tensor_create,
    tensor_sum,
)

from conftest import check_op


def test_create_fill_and_values():
    t = tensor_create([2, 3], 0.5)
    assert t.shape == (2, 3)
    assert np.all(t.data == 0.5)
    u = tensor_create([2, 2], [1, 2, 3, 4])
    assert u[1, 0] == 3.0
    assert u.data.flags["C_CONTIGUOUS"]


@pytest.mark.parametrize("shape", [[], [0, 2], [3, -1]])
def test_create_rejects_bad_shapes(shape):
    with pytest.raises(TensorError):
        tensor_create(shape)


def test_create_rejects_wrong_value_count():
    with pytest.raises(TensorError):
        tensor_create([2, 2], [1, 2, 3])


def test_tensor_equality_and_finite_check():
    assert Tensor([1.0, 2.0]) == Tensor([1.0, 2.0])
    assert Tensor([1.0, 2.0]) != Tensor([1.0, 3.0])
    with pytest.raises(TensorError):
        Tensor([1.0, np.nan], check_finite=True)


def test_fast_mode_switches_dtype():
    assert default_dtype() == np.float64
    with fast_mode():
        assert tensor_create([2], 1.0).data.dtype == np.float32
    assert tensor_create([2], 1.0).data.dtype == np.float64


def test_gradients_accumulate_over_reuse():
    # f = sum(x * x + 3x) -> df/dx = 2x + 3
    x = leaf(np.array([1.0, -2.0, 0.5]))
    loss = tensor_sum(add(mul(x, x), scale(x, 3.0)))
    grads = backward(loss)
    np.testing.assert_array_equal(grads[x], 2 * x.value + 3)


def test_diamond_graph_visits_shared_node_once():
    x = leaf(np.array([2.0]))
    y = mul(x, x)
    z = add(y, y)  # 2 x^2
    grads = backward(tensor_sum(z))
    assert grads[x][0] == 8.0


def test_constants_receive_no_gradient():
    x = leaf(np.array([1.0, 2.0]))
    c = constant(np.array([3.0, 4.0]))
    grads = backward(tensor_sum(mul(x, c)))
    assert c not in grads
    np.testing.assert_array_equal(grads[x], [3.0, 4.0])


def test_backward_requires_scalar_loss():
    x = leaf(np.ones(3))
    with pytest.raises(TensorError):
        backward(scale(x, 2.0))


def test_cycle_is_detected():
    a = leaf(np.ones(1))
    b = Node(np.ones(1), (a,), lambda g: (g,))
    c = Node(np.ones(1), (b,), lambda g: (g,))
    b.parents = (a, c)  # close the loop by hand
    with pytest.raises(GraphError):
        backward(c)


def test_shape_mismatch_in_ops():
    with pytest.raises(TensorError):
        add(leaf(np.ones(2)), leaf(np.ones(3)))


def test_backward_rejects_wrong_gradient_shape():
    x = leaf(np.ones(3))
    bad = Node(np.ones(1), (x,), lambda g: (np.ones(2),))
    with pytest.raises(GraphError):
        backward(bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_elementary_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 4))
    assert check_op(lambda x, y: mul(add(x, y), x), [a, b], rng) < 1e-6
    assert check_op(lambda x: reshape(scale(x, -1.5), (4, 3)), [a], rng) < 1e-6
