import numpy as np
import pytest

from ddsr.constfit import fit_constants, fitted_tree, nrmse
from ddsr.expr import Node, evaluate, parse_prefix


def placeholder(text):
    """Prefix text where the symbol ``c`` is an unbound constant."""
    def conv(node):
        if node.sym == "c":
            return Node("c")
        return Node(node.sym, tuple(conv(ch) for ch in node.children), node.value)

    return conv(parse_prefix(text))


def test_nrmse_definition():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert nrmse(y, y) == 0.0
    assert nrmse(np.full(4, y.mean()), y) == pytest.approx(1.0)
    assert nrmse(np.full(3, 6.0), np.full(3, 5.0)) == pytest.approx(1.0)  # constant targets use unit scale
    assert nrmse(np.array([np.nan, 1, 1, 1.0]), y) == np.inf


def test_scale_constant_closed_form():
    X = np.array([[1.0], [2.0]])
    y = np.array([3.0, 6.0])
    res = fit_constants(placeholder("* c x1"), X, y)
    want = float((X[:, 0] @ y) / (X[:, 0] @ X[:, 0]))
    assert abs(res.constants[0] - want) < 1e-6 and res.nrmse < 1e-8
    assert res.converged and not res.failed


def test_constant_fits_mean():
    X = np.linspace(0, 1, 7)[:, None]
    res = fit_constants(Node("c"), X, np.full(7, 5.0))
    assert abs(res.constants[0] - 5.0) < 1e-6


def test_no_constants_returns_immediately():
    X = np.linspace(-1, 1, 9)[:, None]
    y = X[:, 0] ** 2
    res = fit_constants(Node("x1"), X, y)
    assert res.iterations == 0 and res.constants == ()
    assert res.nrmse == pytest.approx(nrmse(X[:, 0], y))


def test_linear_instances_recovered_and_rss_monotone():
    rng = np.random.default_rng(0)
    tree = placeholder("+ * c x1 c")
    for _ in range(50):
        c1, c2 = rng.uniform(-5, 5, size=2)
        X = rng.uniform(-3, 3, size=(40, 1))
        y = c1 * X[:, 0] + c2
        res = fit_constants(tree, X, y)
        # constants are numbered in level order: the additive one comes first
        got = np.array(res.constants)
        want = np.array([c2, c1])
        assert np.all(np.abs(got - want) <= 1e-6 * np.abs(want)), (got, want)
        trace = np.array(res.rss_trace)
        assert np.all(np.diff(trace) <= 0)


def test_nonlinear_fit():
    rng = np.random.default_rng(1)
    X = rng.uniform(-2, 2, size=(60, 1))
    y = 2.5 * np.sin(1.3 * X[:, 0])
    res = fit_constants(placeholder("* c sin * c x1"), X, y, init=np.array([2.0, 1.0]))
    assert res.nrmse < 1e-8
    assert np.allclose(evaluate(fitted_tree(placeholder("* c sin * c x1"), res), X), y, atol=1e-7)


def test_all_non_finite_start_fails():
    X = np.linspace(-3, -1, 5)[:, None]
    res = fit_constants(placeholder("* c log x1"), X, np.ones(5))
    assert res.failed and res.nrmse == np.inf


def test_partial_domain_hole_marks_failure():
    # log(x1 + c) is undefined on part of the data at the optimum start
    X = np.linspace(-1, 1, 11)[:, None]
    y = np.log(X[:, 0] + 2.0)
    res = fit_constants(placeholder("log + x1 c"), X, y, init=np.array([0.5]))
    assert res.failed or res.nrmse < 1e-6


def test_fit_is_pure():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 2))
    y = np.exp(0.3 * X[:, 0]) + X[:, 1]
    tree = placeholder("+ exp * c x1 * c x2")
    a, b = fit_constants(tree, X, y), fit_constants(tree, X.copy(), y.copy())
    assert a == b
