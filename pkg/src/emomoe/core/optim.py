"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import ContractViolation, Tensor


class Adam:
    """Standard Adam with bias correction.

    Moments are kept per parameter and shape-checked on every step; the step
    count increases exactly once per ``step`` call.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ContractViolation(
                    f"adam: grad shape {p.grad.shape} != param shape {p.data.shape}"
                    + (f" for {p.name}" if p.name else "")
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
