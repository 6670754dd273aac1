"""Central finite-difference oracle shared by the gradient tests."""

import os
from typing import Callable, Sequence

import numpy as np

from src.fpt_plus.tensor import Tensor, backward, graph_scope, no_grad

RUN_SLOW = os.environ.get("FPT_RUN_SLOW") == "1"


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
              atol: float = 1e-4, rtol: float = 1e-2, seed: int = 0,
              max_elements: int = 0) -> float:
    """Fraction of input elements whose analytic gradient matches central differences.

    ``fn`` rebuilds its output from the current contents of ``inputs``. The
    checked loss is sum(output * w) for fixed random weights w; the numeric side
    reduces in float64. With ``max_elements`` > 0 only that many randomly chosen
    elements per input are perturbed.
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        shape = fn().shape
    weights = rng.uniform(-1.0, 1.0, size=shape)

    with graph_scope():
        for t in inputs:
            t.zero_grad()
        backward((fn() * Tensor(weights)).sum())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def loss() -> float:
        with no_grad():
            return float((fn().data.astype(np.float64) * weights).sum())

    checked = passed = 0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements and flat.size > max_elements:
            positions = rng.choice(flat.size, size=max_elements, replace=False)
        for i in positions:
            original = flat[i]
            flat[i] = original + h
            plus = loss()
            flat[i] = original - h
            minus = loss()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            checked += 1
            if abs(numeric - grad.reshape(-1)[i]) <= atol + rtol * abs(numeric):
                passed += 1
        t.zero_grad()
    return passed / checked if checked else 1.0
