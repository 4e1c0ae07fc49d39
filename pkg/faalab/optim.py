"""
AdamW: adaptive moments with decoupled weight decay.
"""

import logging
from typing import Dict, Mapping

import numpy as np

from faalab.errors import ConfigError, ShapeError
from faalab.numerics import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """
    Adam with weight decay applied directly to the parameters, outside the
    moment estimates.

    Usage:
        opt = AdamW(model.named_parameters(), lr=1e-4, weight_decay=0.01)
        opt.step({name: tape.gradient(p) for name, p in params.items()})
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"lr must be > 0, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        self.params: Dict[str, Tensor] = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.reset()

    def reset(self) -> None:
        """Zero both moment estimates and the step counter."""
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """
        Apply one update. Parameters without an entry in ``grads`` are treated
        as having a zero gradient (they still decay).

        Raises:
            ShapeError: If a gradient shape differs from its parameter
        """
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
