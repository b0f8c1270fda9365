"""
Optimizer Module

Adam with global-norm gradient clipping. Only tensors handed to ``step``
are updated, so frozen tensors are never touched.
"""

from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from autodiff import Tensor
from errors import NonFiniteError


class Adam:
    """
    Adaptive-moment optimizer.

    Moment buffers and bias-correction step counts are kept per tensor name,
    so a tensor that starts training late (class heads) gets its own
    correction schedule.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: Optional[float] = 1.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.steps: Dict[str, int] = {}

    def step(self, named: Iterable[Tuple[str, Tensor]]) -> float:
        """
        Apply one update to every tensor that has a gradient, then clear
        those gradients.

        Args:
            named: (name, tensor) pairs eligible for updating

        Returns:
            Global gradient norm before clipping

        Raises:
            NonFiniteError: If any gradient holds NaN or infinity
        """
        updates = [(name, t) for name, t in named if t.grad is not None]
        for name, tensor in updates:
            if not np.all(np.isfinite(tensor.grad)):
                raise NonFiniteError(name)

        norm = float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for _, t in updates)))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm

        for name, tensor in updates:
            grad = tensor.grad * scale
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
                self.steps[name] = 0
            self.steps[name] += 1
            t = self.steps[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            tensor.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(tensor.dtype)
            tensor.grad = None

        return norm

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moment buffers as ``optim.m.<name>`` / ``optim.v.<name>`` arrays."""
        arrays = {}
        for name in self.m:
            arrays[f"optim.m.{name}"] = self.m[name]
            arrays[f"optim.v.{name}"] = self.v[name]
        return arrays

    def load_state(self, arrays: Dict[str, np.ndarray], steps: Dict[str, int]) -> None:
        """Restore moment buffers and step counts saved by ``state_arrays``."""
        self.m, self.v = {}, {}
        for key, value in arrays.items():
            if key.startswith("optim.m."):
                self.m[key[len("optim.m."):]] = value.copy()
            elif key.startswith("optim.v."):
                self.v[key[len("optim.v."):]] = value.copy()
        self.steps = {name: int(count) for name, count in steps.items()}


def optimizer_step(params, optimizer: Adam) -> float:
    """Update the trainable tensors of a ParameterStore and clear all gradients."""
    norm = optimizer.step(params.trainable())
    params.zero_grad()
    return norm
