import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadranet import data
from quadranet import quadneuron as qn


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2 ** 32 - 1))
def test_lowrank_equals_full_with_outer_product(n, seed):
    rng = np.random.default_rng(seed)
    low = qn.LowRankNeuron(*rng.normal(size=(3, n)), b=float(rng.normal()))
    x = rng.normal(size=(5, n))
    assert np.max(np.abs(qn.forward_lowrank(low, x) - qn.forward_full(low.to_full(), x))) <= 1e-12


def test_full_neuron_explicit_sum():
    W_q = np.array([[1.0, 2.0], [0.0, -1.0]])
    neuron = qn.FullRankNeuron(W_q, np.array([0.5, 0.5]), 1.0)
    x = np.array([2.0, 3.0])
    expected = 1 * 4 + 2 * 2 * 3 + (-1) * 9 + 0.5 * 5 + 1.0
    assert qn.forward_full(neuron, x) == pytest.approx(expected)


def test_shape_validation():
    with pytest.raises(ValueError):
        qn.FullRankNeuron(np.eye(3), np.ones(2))
    with pytest.raises(ValueError):
        qn.LowRankNeuron(np.ones(2), np.ones(3), np.ones(2))
    with pytest.raises(ValueError):
        qn.forward_lowrank(qn.LowRankNeuron(np.ones(2), np.ones(2), np.ones(2)), np.ones(3))


@pytest.mark.parametrize("n", [1, 2, 10, 1000])
def test_complexity(n):
    assert qn.complexity("low", n) == (3 * n + 1, 4 * n)
    assert qn.complexity("full", n) == (n * n + n + 1, n * n + 2 * n)
    assert qn.complexity("linear", n) == (n + 1, n)


def test_complexity_rejects_bad_input():
    with pytest.raises(ValueError):
        qn.complexity("low", 0)
    with pytest.raises(ValueError):
        qn.complexity("cubic", 3)


def test_constructive_xor_solution():
    """W_a = e1, W_b = e2 classifies every quadrant point correctly."""
    ds = data.gen_xor(10, seed=0)
    neuron = qn.LowRankNeuron(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros(2))
    pred = qn.forward_lowrank(neuron, ds.inputs) > 0
    assert np.array_equal(pred, ds.labels == 1)


def test_train_xor_quadratic_and_linear():
    ds = data.gen_xor(10, seed=3)
    y = data.xor_signed_labels(ds)
    _, qacc = qn.train_xor("quadratic", ds.inputs, y, seed=3)
    lin, lacc = qn.train_xor("linear", ds.inputs, y, seed=3)
    assert qacc == 1.0
    assert lacc <= 0.75
    assert np.all(lin.W_a == 0) and np.all(lin.W_b == 0)


def test_train_xor_rejects_bad_labels():
    with pytest.raises(ValueError):
        qn.train_xor("quadratic", np.zeros((2, 2)), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        qn.train_xor("cubic", np.zeros((2, 2)), np.array([1.0, -1.0]))
