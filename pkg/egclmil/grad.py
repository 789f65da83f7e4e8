'''
egclmil / grad.py

Dense forward/backward pairs and a finite-difference verifier

A Matrix is a 2-D float64 numpy array.  Every forward op `op` has a paired
`op_backward` taking the upstream gradient dL/d(out) and returning dL/d(in)
for each input.  Backward composition is chained by hand in model.py.
'''
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

from .errors import DegenerateEmbedding, ShapeError

_logger = logging.getLogger(__name__)

# Denominator floor of the relative error used by grad_check
GRAD_CHECK_FLOOR = 1e-8


def as_matrix(x, name: str = 'matrix') -> np.ndarray:
    ''' Coerce to a finite 2-D float64 array '''
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f'{name} must be 2-D, got shape {m.shape}')
    if not np.all(np.isfinite(m)):
        raise ShapeError(f'{name} holds non-finite values')
    return m


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f'{op}: shape mismatch {a.shape} vs {b.shape}')


# =============================================================================
# Linear algebra
# =============================================================================
def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f'matmul: inner dimensions disagree {a.shape} x {b.shape}')
    return a @ b


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return g @ b.T, a.T @ g


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    '''
    Elementwise sum.  `b` may also be a row bias (1-D of length cols, or
    1 x cols) broadcast over the rows of `a`.
    '''
    if b.ndim == 1:
        b = b.reshape(1, -1)
    if b.shape != a.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f'add: shape mismatch {a.shape} vs {b.shape}')
    return a + b


def add_backward(g: np.ndarray, b_shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    if tuple(b_shape) == g.shape:
        return g, g
    return g, g.sum(axis=0).reshape(b_shape)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * s


def scale_backward(g: np.ndarray, s: float) -> np.ndarray:
    return g * s


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, 'hadamard')
    return a * b


def hadamard_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return g * b, g * a


# =============================================================================
# Nonlinearities
# =============================================================================
def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    ''' y is the forward output '''
    return g * (1.0 - y * y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    ''' y is the forward output '''
    return g * y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    ''' x is the forward input; the subgradient at 0 is 0 '''
    return g * (x > 0)


def row_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    ''' y is the forward output '''
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def l2_normalize_row(x: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise DegenerateEmbedding('l2_normalize_row')
    return x / norm


def l2_normalize_row_backward(g: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    ''' x is the forward input, y = x / |x| '''
    norm = float(np.linalg.norm(x))
    return (g - y * float(np.dot(y.ravel(), g.ravel()))) / norm


# =============================================================================
# Finite-difference verification
# =============================================================================
@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    worst_param: str = ''
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        verdict = 'pass' if self.passed else 'FAIL'
        return (
            f'GradCheckReport({self.op}: max_rel_error={self.max_rel_error:.3e} '
            f'tol={self.tolerance:.1e} worst={self.worst_param} {verdict})'
        )


def grad_check(
    f: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
    params: Dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    name: str = 'composite',
    floor: float = GRAD_CHECK_FLOOR,
    atol: float = 0.0,
) -> GradCheckReport:
    '''
    Compare the analytic gradient of a scalar function with central
    differences (f(t + h e_i) - f(t - h e_i)) / 2h for every coordinate.

    Args:
        f: maps a name -> array dict to (value, name -> gradient dict)
        params: point of evaluation, left unmodified
        h: finite-difference step
        tol: pass threshold on the max relative error
        name: label for the report
        floor: lower bound of the relative-error denominator
        atol: absolute agreement below which a coordinate counts as exact;
            covers entries whose size is at the level of difference round-off

    Returns:
        GradCheckReport with the maximum over all coordinates of
        |analytic - numeric| / max(|analytic|, |numeric|, floor)
    '''
    point = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = f(point)

    worst, worst_name, checked = 0.0, '', 0
    for key, value in point.items():
        grad = np.asarray(analytic.get(key, np.zeros_like(value)), dtype=np.float64)
        if grad.shape != value.shape:
            raise ShapeError(f'grad_check: gradient of {key} has shape {grad.shape}, expected {value.shape}')
        flat = value.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus, _ = f(point)
            flat[i] = original - h
            f_minus, _ = f(point)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(flat_grad[i]), abs(numeric), floor)
            diff = abs(flat_grad[i] - numeric)
            rel = 0.0 if diff <= atol else diff / denom
            checked += 1
            if rel > worst:
                worst, worst_name = rel, f'{key}[{i}]'

    report = GradCheckReport(
        op=name, max_rel_error=float(worst), tolerance=tol,
        worst_param=worst_name, n_checked=checked
    )
    _logger.debug(str(report))
    return report
