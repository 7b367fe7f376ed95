"""Adam optimizer acting in place on parameter arrays."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; ``step`` is the 1-based count."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    if step < 1:
        raise DimensionError(f"adam_step needs a step count >= 1, got {step}")
    m[...] = beta1 * m + (1.0 - beta1) * grad
    v[...] = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param[...] = param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a list of named parameters.

    Parameters without a gradient for a given step are skipped (their moment
    buffers stay untouched), which happens routinely for experts that saw no
    tokens in a batch.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        rate = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is None:
                continue
            adam_step(
                p.data,
                np.asarray(p.grad, dtype=np.float64),
                self.m[name],
                self.v[name],
                self.step_count,
                rate,
                self.beta1,
                self.beta2,
                self.eps,
            )

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
