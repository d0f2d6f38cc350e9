from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from mcmdpo.autodiff import (
    PRIMITIVES,
    AutodiffError,
    Graph,
    NonDeterministicError,
    NonFiniteError,
    ShapeError,
    finite_diff_check,
)

RNG = np.random.default_rng(7)


def _check(build, shapes, positive=False, tol=1e-6):
    """Finite-difference check of ``sum(build(g, *param_nodes) * w)`` for a fixed random w."""
    vals = {f"p{i}": (np.abs(RNG.normal(size=s)) + 0.5 if positive else RNG.normal(size=s))
            for i, s in enumerate(shapes)}
    weight = {}

    def loss_fn(arrs):
        g = Graph()
        nodes = [g.param(k, arrs[k]) for k in sorted(arrs)]
        out = build(g, *nodes)
        if "w" not in weight:
            weight["w"] = RNG.normal(size=g.value(out).shape)
        return g, g.sum(g.mul(out, g.const(weight["w"])))

    rep = finite_diff_check(loss_fn, vals, h=1e-5)
    assert rep.passed(tol), rep


@pytest.mark.parametrize("kind,build,shapes,positive", [
    ("add", lambda g, a, b: g.add(a, b), [(3, 4), (3, 4)], False),
    ("add_row", lambda g, a, b: g.add(a, b), [(3, 4), (4,)], False),
    ("add_scalar", lambda g, a, b: g.add(a, b), [(3, 4), ()], False),
    ("sub_row", lambda g, a, b: g.sub(a, b), [(3, 4), (4,)], False),
    ("mul_row", lambda g, a, b: g.mul(a, b), [(3, 4), (4,)], False),
    ("mul_scalar", lambda g, a, b: g.mul(a, b), [(2, 5), ()], False),
    ("matmul", lambda g, a, b: g.matmul(a, b), [(3, 4), (4, 2)], False),
    ("sum", lambda g, a: g.sum(a), [(3, 4)], False),
    ("mean", lambda g, a: g.mean(a), [(3, 4)], False),
    ("log", lambda g, a: g.log(a), [(3, 4)], True),
    ("exp", lambda g, a: g.exp(a), [(3, 4)], False),
    ("sigmoid", lambda g, a: g.sigmoid(a), [(3, 4)], False),
    ("tanh", lambda g, a: g.tanh(a), [(3, 4)], False),
    ("log_softmax", lambda g, a: g.log_softmax(a), [(3, 5)], False),
    ("gather_rows", lambda g, a: g.gather_rows(a, [2, 0, 2, 1]), [(3, 4)], False),
    ("concat", lambda g, a, b: g.concat(a, b), [(2, 3), (4, 3)], False),
    ("scale", lambda g, a: g.scale(a, -2.5), [(3, 4)], False),
    ("transpose", lambda g, a: g.transpose(a), [(3, 4)], False),
])
def test_primitive_gradients(kind, build, shapes, positive):
    _check(build, shapes, positive)


def test_every_primitive_is_covered():
    assert PRIMITIVES == {"add", "sub", "mul", "matmul", "sum", "mean", "log", "exp", "sigmoid", "tanh",
                          "log_softmax", "gather_rows", "concat", "scale", "transpose"}


def test_composite_attention_like_graph():
    def build(g, q, k, v):
        scores = g.scale(g.matmul(q, g.transpose(k)), 0.5)
        return g.matmul(g.exp(g.log_softmax(scores)), g.tanh(v))

    _check(build, [(4, 3), (4, 3), (4, 2)])


def test_reused_node_accumulates_gradient():
    g = Graph()
    a = g.param("a", np.array([1.5, -2.0]))
    root = g.sum(g.mul(a, a))
    grads = g.backward(root)
    np.testing.assert_array_equal(grads["a"], [3.0, -4.0])


def test_frozen_param_gets_no_gradient_entry():
    g = Graph()
    a = g.param("a", np.ones(3))
    b = g.param("b", np.ones(3), trainable=False)
    grads = g.backward(g.sum(g.mul(a, b)))
    assert set(grads) == {"a"}


def test_unused_trainable_param_gets_zero_gradient():
    g = Graph()
    a = g.param("a", np.ones(3))
    g.param("b", np.ones((2, 2)))
    grads = g.backward(g.sum(a))
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))


def test_backward_is_repeatable():
    g = Graph()
    a = g.param("a", RNG.normal(size=(3, 3)))
    root = g.sum(g.tanh(g.matmul(a, a)))
    first, second = g.backward(root), g.backward(root)
    assert first["a"].tobytes() == second["a"].tobytes()


def test_backward_needs_scalar_root():
    g = Graph()
    a = g.param("a", np.ones(3))
    with pytest.raises(AutodiffError):
        g.backward(g.exp(a))


@pytest.mark.parametrize("kind,shape_a,shape_b", [
    ("add", (2, 3), (3, 2)),
    ("mul", (2, 3), (2,)),
    ("matmul", (2, 3), (2, 3)),
    ("concat", (2, 3), (2, 4)),
])
def test_shape_errors(kind, shape_a, shape_b):
    g = Graph()
    a = g.param("a", np.ones(shape_a))
    b = g.param("b", np.ones(shape_b))
    with pytest.raises(ShapeError):
        g.apply(kind, a, b)


def test_gather_out_of_range():
    g = Graph()
    a = g.param("a", np.ones((2, 3)))
    with pytest.raises(ShapeError):
        g.gather_rows(a, [0, 2])


def test_non_finite_values_raise():
    g = Graph()
    a = g.param("a", np.array([800.0]))
    with pytest.raises(NonFiniteError):
        g.exp(a)
    with pytest.raises(NonFiniteError):
        g.log(g.const(np.array([0.0])))


def test_unknown_primitive_and_arity():
    g = Graph()
    a = g.param("a", np.ones(2))
    with pytest.raises(AutodiffError):
        g.apply("softplus", a)
    with pytest.raises(AutodiffError):
        g.apply("add", a)


def test_duplicate_param_name():
    g = Graph()
    g.param("a", 1.0)
    with pytest.raises(AutodiffError):
        g.param("a", 2.0)


def test_log_softmax_is_stable_for_large_logits():
    g = Graph()
    out = g.value(g.log_softmax(g.const(np.array([[1000.0, 0.0, -1000.0]]))))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_finite_diff_check_detects_nondeterminism():
    calls = iter(range(100))

    def loss_fn(arrs):
        g = Graph()
        a = g.param("a", arrs["a"])
        return g, g.add(g.sum(a), g.const(float(next(calls))))

    with pytest.raises(NonDeterministicError):
        finite_diff_check(loss_fn, {"a": np.ones(2)})


def test_finite_diff_check_reports_wrong_gradient():
    # b mirrors a but is frozen, so the tape reports d/da = a while the true slope is 2a
    def loss_fn(arrs):
        g = Graph()
        a = g.param("a", arrs["a"])
        b = g.param("b", arrs["a"] * 1.0, trainable=False)
        return g, g.sum(g.mul(a, b))

    rep = finite_diff_check(loss_fn, {"a": np.array([1.0, 2.0])})
    assert not rep.passed(1e-4)
    assert rep.offending == "a"


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_log_softmax_rows_normalise(x):
    g = Graph()
    out = g.value(g.log_softmax(g.const(x)))
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700, allow_nan=False)))
def test_sigmoid_matches_reference_formula(x):
    g = Graph()
    out = g.value(g.sigmoid(g.const(x)))
    expected = expit(x)
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-300)
