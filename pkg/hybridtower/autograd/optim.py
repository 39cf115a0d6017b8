"""
Adam optimizer over named parameters
"""
from collections import OrderedDict
from typing import Dict, List, Tuple

import numpy as np

from hybridtower.autograd.tensor import Parameter
from hybridtower.errors import DataFormatError


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped"""

    def __init__(self, named_params: List[Tuple[str, Parameter]], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = 0

    def step(self):
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (p.grad ** 2)
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, _ in self.named_params:
            state[f"adam.m.{name}"] = self.m[name].copy()
            state[f"adam.v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step: int):
        for name, p in self.named_params:
            m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
            if m_key not in state or v_key not in state:
                raise DataFormatError(f"Optimizer state missing for {name}")
            self.m[name] = np.array(state[m_key], dtype=np.float64).reshape(p.shape)
            self.v[name] = np.array(state[v_key], dtype=np.float64).reshape(p.shape)
        self.t = int(step)
