from typing import List, Sequence

import numpy as np

from config import settings
from models import OptimizerName
from nn.tensor import Parameter

class Optimizer:
    def __init__(self, params: Sequence[Parameter], lr: float):
        if lr < 0:
            raise ValueError(f"Taux d'apprentissage négatif: {lr}")
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.steps += 1
        for i, p in enumerate(self.params):
            if p.grad is not None:
                self._update(i, p)

    def _update(self, i: int, p: Parameter) -> None:
        raise NotImplementedError

class SGD(Optimizer):
    """Descente de gradient avec momentum: v = mu*v + g; p -= lr*v"""

    def __init__(self, params: Sequence[Parameter], lr: float = settings.LEARNING_RATE,
                 momentum: float = settings.SGD_MOMENTUM):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p):
        v = self.velocity[i]
        v *= self.momentum
        v += p.grad
        if self.lr:
            p.data -= p.data.dtype.type(self.lr) * v

class Adam(Optimizer):
    def __init__(self, params: Sequence[Parameter], lr: float = settings.LEARNING_RATE,
                 beta1: float = settings.ADAM_BETA1, beta2: float = settings.ADAM_BETA2,
                 eps: float = settings.ADAM_EPS):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p):
        g = p.grad
        m, v = self.m[i], self.v[i]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        if not self.lr:
            return
        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

def build_optimizer(name: OptimizerName, params: Sequence[Parameter], lr: float) -> Optimizer:
    if OptimizerName(name) == OptimizerName.ADAM:
        return Adam(params, lr)
    return SGD(params, lr)
