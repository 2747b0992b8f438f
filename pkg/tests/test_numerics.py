import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthforge import numerics as nx
from depthforge.numerics import Parameter, Tape, Tensor


def param(name, data):
    return Parameter(name, Tensor(np.array(data, dtype=float)))


# ----------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    out = nx.softmax_rows(np.zeros((1, 3))).data
    np.testing.assert_allclose(out, np.full((1, 3), 1 / 3), atol=1e-15)


def test_softmax_two_logits_matches_high_precision_oracle():
    mpmath.mp.dps = 40
    den = mpmath.exp(2) + mpmath.exp(6)
    expected = [float(mpmath.exp(2) / den), float(mpmath.exp(6) / den)]
    out = nx.softmax_rows(np.array([[2.0, 6.0]])).data[0]
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out, [0.01799, 0.98201], atol=1e-5)


def test_softmax_shift_invariance_large_logits():
    big = nx.softmax_rows(np.array([[1000.0, 1001.0]])).data
    small = nx.softmax_rows(np.array([[0.0, 1.0]])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, small, atol=1e-15)


def test_softmax_rejects_non_finite_and_names_row():
    x = np.zeros((3, 2))
    x[2, 1] = np.inf
    with pytest.raises(ValueError, match=r"row \(2,\)"):
        nx.softmax_rows(x)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)),
              elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one(x):
    out = nx.softmax_rows(x).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- backward


def test_linear_map_gradient_replicates_input_per_row():
    W = param("W", np.arange(6.0).reshape(2, 3))
    x = np.array([[0.5], [-1.0], [2.0]])
    with Tape():
        loss = nx.total(nx.matmul(W, x))
        grads = nx.backward(loss, [W])
    np.testing.assert_array_equal(grads["W"], np.tile(x.T, (2, 1)))


def test_disconnected_scaling_gives_zero_grad():
    p = param("p", [1.5, -2.0])
    with Tape():
        loss = nx.total(nx.scale(p, 0.0))
        grads = nx.backward(loss, [p])
    np.testing.assert_array_equal(grads["p"], 0.0)


def test_unreachable_parameter_has_zero_grad():
    p = param("p", [1.0, 2.0])
    q = param("q", [3.0])
    with Tape():
        loss = nx.total(nx.scale(p, p))
        grads = nx.backward(loss, [p, q])
    np.testing.assert_array_equal(grads["q"], [0.0])
    np.testing.assert_allclose(grads["p"], [2.0, 4.0])


def test_no_recorded_ops_gives_zero_gradients():
    p = param("p", [1.0, 2.0])
    p.tensor.grad[:] = 7.0
    with nx.no_grad():
        loss = nx.total(nx.scale(p, p))
    grads = nx.backward(loss, [p])
    np.testing.assert_array_equal(grads["p"], 0.0)


def test_frozen_parameters_get_no_grad_storage():
    frozen = Parameter("f", Tensor(np.ones(3)), trainable=False)
    p = param("p", np.ones(3))
    with Tape():
        loss = nx.total(nx.scale(frozen, p))
        nx.backward(loss, [frozen, p])
    assert frozen.tensor.grad is None


def test_backward_twice_is_rejected():
    p = param("p", [1.0])
    with Tape():
        loss = nx.total(nx.scale(p, p))
        nx.backward(loss, [p])
        with pytest.raises(nx.TapeError):
            nx.backward(loss, [p])


def test_backward_needs_scalar():
    p = param("p", [1.0, 2.0])
    with Tape():
        y = nx.scale(p, 2.0)
        with pytest.raises(ValueError):
            nx.backward(y, [p])


def test_tape_records_primitives_in_order_and_replays_in_reverse():
    p = param("p", np.ones((2, 2)))
    with Tape() as tape:
        h = nx.relu(nx.matmul(p, np.eye(2)))
        loss = nx.cross_entropy(h, np.array([0, 1]))
    assert tape.ops == ["matmul", "relu", "cross_entropy"]
    assert set(tape.ops) <= set(nx.PRIMITIVES)


def _toy_graph(p, q):
    h = nx.layer_norm(nx.matmul(p, q))
    h = nx.concat([nx.relu(h), nx.softmax_rows(h)], axis=-1)
    h = nx.add(nx.transpose(h), nx.broadcast(np.ones((1, 2)), (8, 2)))
    return nx.cross_entropy(nx.transpose(nx.slice_(h, slice(0, 4))), np.array([1, 3]))


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    p = param("p", rng.normal(size=(2, 3)))
    q = param("q", rng.normal(size=(3, 4)))
    runs = []
    for _ in range(2):
        with Tape():
            grads = nx.backward(_toy_graph(p, q), [p, q])
        runs.append({k: v.copy() for k, v in grads.items()})
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


# ------------------------------------------------------- finite differences


def test_finite_diff_quadratic():
    p = param("p", [3.0])
    err = nx.finite_diff_check(lambda: nx.total(nx.scale(p, p)), [p], eps=1e-5)
    assert err <= 1e-8


def test_finite_diff_softmax_cross_entropy_four_logits():
    z = param("z", [0.3, -1.2, 2.0, 0.7])
    f = lambda: nx.cross_entropy(nx.broadcast(z, (1, 4)), np.array([2]))
    assert nx.finite_diff_check(f, [z], eps=1e-5) <= 1e-6


def test_finite_diff_rejects_bad_eps_and_non_finite():
    p = param("p", [1.0])
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda: nx.total(p), [p], eps=1e-2)
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda: nx.total(nx.scale(p, np.inf)), [p], eps=1e-5)


PRIMITIVE_CASES = {
    "matmul": lambda a, b: nx.matmul(a, b),
    "matmul_batched": lambda a, b: nx.matmul(nx.broadcast(a, (3, 3, 4)), b),
    "add": lambda a, b: nx.add(a, nx.slice_(b, (slice(0, 3), slice(0, 4)))),
    "scale": lambda a, b: nx.scale(a, nx.slice_(b, (slice(0, 1), slice(0, 4)))),
    "concat": lambda a, b: nx.concat([a, nx.transpose(b)], axis=0),
    "softmax_rows": lambda a, b: nx.softmax_rows(nx.scale(a, 3.0)),
    "relu": lambda a, b: nx.relu(a),
    "layer_norm": lambda a, b: nx.layer_norm(a),
    "slice": lambda a, b: nx.slice_(a, (slice(1, 3), slice(None, None, 2))),
    "transpose": lambda a, b: nx.transpose(nx.broadcast(a, (2, 3, 4)), (2, 0, 1)),
    "broadcast": lambda a, b: nx.broadcast(nx.slice_(b, (slice(0, 1),)), (5, 5)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_central_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    a = param("a", rng.normal(size=(3, 4)) + 0.05)
    b = param("b", rng.normal(size=(4, 5)))
    w = rng.normal(size=PRIMITIVE_CASES[name](a, b).shape)

    def f():
        return nx.total(nx.scale(PRIMITIVE_CASES[name](a, b), w))

    assert nx.finite_diff_check(f, [a, b], eps=1e-6) <= 1e-6


def test_cross_entropy_gradient_and_ignore():
    rng = np.random.default_rng(3)
    z = param("z", rng.normal(size=(2, 3, 4)))
    labels = np.array([[0, 255, 3], [1, 2, 255]])
    assert nx.finite_diff_check(lambda: nx.cross_entropy(z, labels), [z], eps=1e-6) <= 1e-6
    with pytest.raises(ValueError, match="ignored"):
        nx.cross_entropy(z, np.full((2, 3), 255))


def test_cross_entropy_value_matches_formula():
    z = np.array([[1.0, 2.0, 0.5]])
    got = nx.cross_entropy(z, np.array([1])).item()
    expected = -(2.0 - math.log(math.exp(1.0) + math.exp(2.0) + math.exp(0.5)))
    assert got == pytest.approx(expected, abs=1e-14)
