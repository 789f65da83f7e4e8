'''
Test suite for egclmil.grad
'''
import numpy as np
import pytest

from egclmil import grad
from egclmil.errors import *


def _rand(rng, *shape):
    return rng.normal(size=shape)


def _check(f, params, name, tol=1e-5):
    report = grad.grad_check(f, params, name=name, tol=tol)
    assert report.passed, str(report)
    return report


def test_as_matrix():
    assert grad.as_matrix([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ShapeError):
        grad.as_matrix(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        grad.as_matrix([[1.0, np.nan]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        grad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        grad.add(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        grad.hadamard(np.zeros((2, 3)), np.zeros((3, 2)))


def test_add_bias_broadcast():
    out = grad.add(np.zeros((3, 2)), np.array([1.0, 2.0]))
    assert out.tolist() == [[1.0, 2.0]] * 3
    _, db = grad.add_backward(np.ones((3, 2)), (2,))
    assert db.tolist() == [3.0, 3.0]


def test_sigmoid_extremes_finite():
    out = grad.sigmoid(np.array([[-1000.0, 0.0, 1000.0]]))
    assert out.tolist() == [[0.0, 0.5, 1.0]]


def test_row_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = grad.row_softmax(_rand(rng, 4, 5) * 50)
    assert np.allclose(out.sum(axis=1), 1.0)


def test_relu_subgradient_at_zero():
    g = grad.relu_backward(np.ones((1, 3)), np.array([[-1.0, 0.0, 2.0]]))
    assert g.tolist() == [[0.0, 0.0, 1.0]]


def test_l2_normalize_zero_fails():
    with pytest.raises(DegenerateEmbedding):
        grad.l2_normalize_row(np.zeros((1, 4)))


def test_grad_matmul():
    rng = np.random.default_rng(1)
    w = _rand(rng, 4, 2)

    def f(p):
        out = grad.matmul(p['a'], p['b'])
        da, db = grad.matmul_backward(w, p['a'], p['b'])
        return float((out * w).sum()), {'a': da, 'b': db}

    _check(f, {'a': _rand(rng, 4, 3), 'b': _rand(rng, 3, 2)}, 'matmul')


def test_grad_add_and_hadamard():
    rng = np.random.default_rng(2)
    w = _rand(rng, 3, 4)

    def f(p):
        s = grad.add(p['a'], p['bias'])
        out = grad.hadamard(s, p['c'])
        ds, dc = grad.hadamard_backward(w, s, p['c'])
        da, dbias = grad.add_backward(ds, p['bias'].shape)
        return float((out * w).sum()), {'a': da, 'bias': dbias, 'c': dc}

    _check(f, {'a': _rand(rng, 3, 4), 'bias': _rand(rng, 4), 'c': _rand(rng, 3, 4)}, 'add_hadamard')


def test_grad_nonlinearities():
    rng = np.random.default_rng(3)
    w = _rand(rng, 2, 5)
    for name, forward, backward, uses_output in (
        ('tanh', grad.tanh, grad.tanh_backward, True),
        ('sigmoid', grad.sigmoid, grad.sigmoid_backward, True),
        ('relu', grad.relu, grad.relu_backward, False),
    ):
        def f(p, forward=forward, backward=backward, uses_output=uses_output):
            y = forward(p['x'])
            dx = backward(w, y if uses_output else p['x'])
            return float((y * w).sum()), {'x': dx}

        x = _rand(rng, 2, 5)
        # keep relu inputs away from the kink
        x[np.abs(x) < 0.05] = 0.5
        _check(f, {'x': x}, name)


def test_grad_row_softmax():
    rng = np.random.default_rng(4)
    w = _rand(rng, 3, 4)

    def f(p):
        y = grad.row_softmax(p['x'])
        return float((y * w).sum()), {'x': grad.row_softmax_backward(w, y)}

    _check(f, {'x': _rand(rng, 3, 4)}, 'row_softmax')


def test_grad_l2_normalize():
    rng = np.random.default_rng(5)
    w = _rand(rng, 1, 6)

    def f(p):
        y = grad.l2_normalize_row(p['x'])
        return float((y * w).sum()), {'x': grad.l2_normalize_row_backward(w, p['x'], y)}

    _check(f, {'x': _rand(rng, 1, 6)}, 'l2_normalize')


def test_grad_check_flags_wrong_gradient():
    def f(p):
        return float((p['x'] ** 2).sum()), {'x': 3.0 * p['x']}

    report = grad.grad_check(f, {'x': np.array([[1.0, -2.0]])}, name='wrong')
    assert not report.passed
    assert report.max_rel_error == pytest.approx(1.0 / 3.0, rel=1e-4)
    assert report.n_checked == 2
    assert 'FAIL' in str(report)


def test_grad_check_leaves_params_untouched():
    x = np.array([[0.5, 1.5]])

    def f(p):
        return float((p['x'] ** 2).sum()), {'x': 2.0 * p['x']}

    grad.grad_check(f, {'x': x})
    assert x.tolist() == [[0.5, 1.5]]


def test_grad_check_gradient_shape_mismatch():
    def f(p):
        return 0.0, {'x': np.zeros(3)}

    with pytest.raises(ShapeError):
        grad.grad_check(f, {'x': np.zeros((1, 2))})


def test_grad_check_absolute_tolerance_for_tiny_entries():
    def f(p):
        x = p['x']
        return float(1e-7 * (x ** 2).sum()), {'x': 2e-7 * x + 5e-10}

    x = {'x': np.array([[1.0, -0.5]])}
    assert not grad.grad_check(f, x, name='tiny').passed
    assert grad.grad_check(f, x, name='tiny', atol=1e-9).passed

    def wrong(p):
        return float((p['x'] ** 2).sum()), {'x': 3.0 * p['x']}

    assert not grad.grad_check(wrong, x, name='wrong', atol=1e-9).passed
