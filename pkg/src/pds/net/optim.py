"""AdamW over a flat parameter vector.

Update order per step: decoupled weight decay shrinks the parameters first
(p *= 1 - lr * wd), then the bias-corrected Adam step is applied. Moment
buffers are kept in the parameter dtype so checkpointed state is exact.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, n_params: int, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 dtype=np.float64):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.m = np.zeros(int(n_params), dtype=dtype)
        self.v = np.zeros(int(n_params), dtype=dtype)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if params.shape != self.m.shape or grad.shape != self.m.shape:
            raise ValueError("parameter/gradient size mismatch")
        self.step_count += 1
        t = self.step_count
        if self.weight_decay:
            params *= 1.0 - self.lr * self.weight_decay
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "opt/m": self.m,
            "opt/v": self.v,
            "opt/step": np.array([self.step_count], dtype=np.float64),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        m, v = arrays["opt/m"], arrays["opt/v"]
        if m.shape != self.m.shape or v.shape != self.v.shape:
            raise ValueError("optimizer state size mismatch")
        self.m = m.astype(self.m.dtype)
        self.v = v.astype(self.v.dtype)
        self.step_count = int(arrays["opt/step"][0])
