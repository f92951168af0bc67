import numpy as np
import pytest

from ctce.numerics import Tensor, backward


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to every entry of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| relative to the larger of the two gradients' max magnitudes.

    Gradients that vanish identically (e.g. attention key biases, which the
    softmax cancels) are compared on an absolute scale.
    """
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-4)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def grad_check(build, inputs: list[np.ndarray], eps: float = 1e-5) -> float:
    """Largest relative error between autodiff and finite differences over all inputs.

    ``build`` maps a list of Tensors to a scalar Tensor.
    """
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    loss = build(leaves)
    backward(loss)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(x, k=k):
            args = [Tensor(v) for v in inputs]
            args[k] = Tensor(x)
            return float(build(args).data)
        num = numeric_grad(f, inputs[k].copy(), eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(inputs[k])
        worst = max(worst, rel_error(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
