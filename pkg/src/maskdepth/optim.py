"""Adam with bias correction."""

from __future__ import annotations

import numpy as np


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """One in-place update of parameter ``p`` at step count ``t`` (1-based).

    ``m`` and ``v`` are updated in place as well.
    """
    if g.shape != p.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Holds first/second moment state per named parameter.

    Parameters whose gradient is ``None`` at step time are skipped, which
    matches a zero gradient for fresh state and lets loss terms with weight
    zero leave their private parameters untouched.
    """

    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_update(p.data, p.grad, self.m[name], self.v[name], self.t,
                        self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            if name not in state["m"] or name not in state["v"]:
                raise ValueError(f"optimizer state missing moments for {name!r}")
            if state["m"][name].shape != self.params[name].data.shape:
                raise ValueError(
                    f"optimizer state for {name!r} has shape "
                    f"{state['m'][name].shape}, parameter is "
                    f"{self.params[name].data.shape}")
            self.m[name] = state["m"][name]
            self.v[name] = state["v"][name]
