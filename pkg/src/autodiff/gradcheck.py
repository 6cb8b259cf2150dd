"""Finite-difference gradient checking"""
from typing import Callable, Sequence

import numpy as np

from src.autodiff.tensor import Tape, Tensor, backward


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call. Inputs
    should be float64 for the differences to be meaningful.
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            numeric_flat[i] = (plus - minus) / (2 * h)
        scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(grad - numeric) / scale))
    return worst
