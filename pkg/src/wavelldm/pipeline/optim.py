"""Adam / AdamW and the step-wise exponential learning-rate decay."""

from __future__ import annotations

import numpy as np

from ..nn import Parameter


def lr_schedule(step: int, base_lr: float, gamma: float, interval: int) -> float:
    """``base_lr * gamma ** floor(step / interval)``."""
    if base_lr <= 0 or gamma <= 0 or interval <= 0 or step < 0:
        raise ValueError("lr_schedule needs positive base_lr, gamma, interval and step >= 0")
    return base_lr * gamma ** (step // interval)


def adam_step(param, grad, m, v, step, lr, beta1, beta2, eps=1e-8, weight_decay=0.0, decoupled=False):
    """One bias-corrected Adam update; returns ``(param, m, v)``.

    ``step`` is 1-based. With ``decoupled=True`` the weight decay is applied
    directly to the parameter (AdamW); otherwise it is added to the gradient.
    """
    if weight_decay and not decoupled:
        grad = grad + weight_decay * param
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    if weight_decay and decoupled:
        param = param - lr * weight_decay * param
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def adamw_step(param, grad, m, v, step, lr, beta1, beta2, eps=1e-8, weight_decay=1e-2):
    return adam_step(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay, decoupled=True)


class Adam:
    """Adam over a named parameter set; ``decoupled=True`` gives AdamW."""

    def __init__(self, named_params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decoupled=False):
        self.params: dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            new, self.m[k], self.v[k] = adam_step(
                p.data, p.grad.astype(p.dtype), self.m[k], self.v[k], self.step_count, self.lr,
                self.beta1, self.beta2, self.eps, self.weight_decay, self.decoupled,
            )
            p.data = new.astype(p.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.float32)}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=p.dtype).reshape(p.shape).copy()
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=p.dtype).reshape(p.shape).copy()


def AdamW(named_params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2) -> Adam:
    return Adam(named_params, lr, betas, eps, weight_decay, decoupled=True)
