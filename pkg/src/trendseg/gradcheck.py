"""Central finite-difference verification of the tape gradients.

All checks run in float64. The error metric is norm-wise:
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    passed: bool


def numerical_grad(fn: Callable[[], T.Tensor], x: T.Tensor, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().data.item()
            flat[i] = orig - step
            fm = fn().data.item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn: Callable[[], T.Tensor], inputs: Sequence[T.Tensor], step: float = STEP) -> float:
    """Worst relative error over ``inputs`` between tape and finite-difference gradients."""
    with T.Tape() as tape:
        loss = fn()
    T.backward(tape, loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, x, step)))
    return worst


def _leaf(rng, *shape, away_from_zero=False):
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (0.1 + np.abs(data))
    return T.Tensor(data, requires_grad=True, dtype=np.float64)


def _projected(out: T.Tensor, rng) -> T.Tensor:
    # random projection so every output entry contributes a distinct weight
    w = T.Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return T.sum_(T.mul(out, w))


def _case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return lambda: _projected(T.add(a, b), np.random.default_rng(1)), [a, b]


def _case_mul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return lambda: _projected(T.mul(a, b), np.random.default_rng(1)), [a, b]


def _case_sum(rng):
    a = _leaf(rng, 2, 3, 4)
    return lambda: T.sum_(a), [a]


def _case_mean(rng):
    a = _leaf(rng, 2, 5)
    return lambda: T.mean(a), [a]


def _case_reshape(rng):
    a = _leaf(rng, 2, 6)
    return lambda: _projected(T.reshape(a, (3, 4)), np.random.default_rng(1)), [a]


def _case_relu(rng):
    a = _leaf(rng, 4, 5, away_from_zero=True)
    return lambda: _projected(T.relu(a), np.random.default_rng(1)), [a]


def _case_sigmoid(rng):
    a = _leaf(rng, 4, 5)
    return lambda: _projected(T.sigmoid(a), np.random.default_rng(1)), [a]


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3, 4, 2), _leaf(rng, 2, 5, 4, 2)
    return lambda: _projected(T.concat([a, b], axis=1), np.random.default_rng(1)), [a, b]


def _case_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    return lambda: _projected(T.matmul(a, b), np.random.default_rng(1)), [a, b]


def _case_linear(rng):
    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    return lambda: _projected(T.linear(x, w, b), np.random.default_rng(1)), [x, w, b]


def _case_max_pool(rng):
    a = _leaf(rng, 2, 2, 6, 4)
    return lambda: _projected(T.max_pool2d(a, (2, 2)), np.random.default_rng(1)), [a]


def _case_conv(dilation, stride):
    def build(rng):
        x, k, b = _leaf(rng, 2, 2, 7, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        fn = lambda: _projected(T.conv2d(x, k, b, stride=stride, dilation=dilation),  # noqa: E731
                                np.random.default_rng(1))
        return fn, [x, k, b]
    return build


def _case_tconv(stride):
    def build(rng):
        x, k, b = _leaf(rng, 2, 3, 4, 3), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2)
        fn = lambda: _projected(T.transposed_conv2d(x, k, b, stride=stride),  # noqa: E731
                                np.random.default_rng(1))
        return fn, [x, k, b]
    return build


def _case_bce(rng):
    z = _leaf(rng, 2, 1, 5, 4)
    target = (rng.random((2, 1, 5, 4)) > 0.5).astype(np.float64)
    return lambda: T.bce_loss(T.sigmoid(z), target), [z]


def random_graph(seed: int):
    """A depth-4 composed graph over the conv ops, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    ci = int(rng.integers(1, 3))
    h = int(rng.choice([4, 6, 8]))
    w = int(rng.integers(2, 5))
    x = _leaf(rng, 2, ci, h, w)
    k1 = _leaf(rng, 3, ci, 3, 3)
    b1 = _leaf(rng, 3)
    k2 = _leaf(rng, 4, 3, 3, 3)
    k3 = _leaf(rng, 4, 2, 3, 3)
    k4 = _leaf(rng, 1, 2 + 3, 1, 1)
    r = int(rng.integers(1, 4))
    target = (rng.random((2, 1, h, w)) > 0.5).astype(np.float64)

    def fn():
        a = T.relu(T.conv2d(x, k1, b1, dilation=r))
        d = T.sigmoid(T.conv2d(a, k2, stride=(2, 1)))
        u = T.transposed_conv2d(d, k3, stride=(2, 1))
        y = T.conv2d(T.concat([u, a], axis=1), k4)
        return T.bce_loss(T.sigmoid(y), target)

    return fn, [x, k1, b1, k2, k3, k4]


CASES: dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "max_pool2d": _case_max_pool,
    "conv2d[r=1,s=1]": _case_conv(1, 1),
    "conv2d[r=2,s=1]": _case_conv(2, 1),
    "conv2d[r=3,s=(2,1)]": _case_conv(3, (2, 1)),
    "transposed_conv2d[s=(2,1)]": _case_tconv((2, 1)),
    "transposed_conv2d[s=2]": _case_tconv(2),
    "bce_loss": _case_bce,
    "graph[seed=0]": lambda rng: random_graph(0),
    "graph[seed=1]": lambda rng: random_graph(1),
    "graph[seed=2]": lambda rng: random_graph(2),
}


def run_suite(seed: int = 0, tol: float = TOLERANCE) -> list[GradCheckResult]:
    results = []
    for name, build in CASES.items():
        fn, inputs = build(np.random.default_rng(seed))
        err = check(fn, inputs)
        results.append(GradCheckResult(name, err, err <= tol))
    return results
