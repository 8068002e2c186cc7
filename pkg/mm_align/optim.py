"""
Adaptive-moment optimizer with global gradient-norm clipping.
"""
from collections.abc import Mapping

import numpy as np

from .common import NumericalError
from .numerics import GradPair, Grads, Matrix


def global_norm(grads: Mapping[str, Matrix]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(
    grads: Mapping[str, Matrix], max_norm: float
) -> tuple[Grads, float]:
    """
    Returns:
        The (possibly rescaled) gradients and their norm before clipping.
    """
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


class Adam:
    """
    Adam over a fixed set of named parameter arrays, updated in place.

    Gradients are accumulated into one :class:`~mm_align.numerics.GradPair`
    per parameter and cleared by every update. Only parameters that
    received a gradient since the last update are touched; all others stay
    bit-identical.
    """

    def __init__(
        self,
        params: Mapping[str, Matrix],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float = 1.0,
    ):
        self.slots = {
            name: GradPair.zeros_like(value) for name, value in params.items()
        }
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}
        self._pending: set[str] = set()

    def accumulate(self, grads: Mapping[str, Matrix]) -> None:
        """
        Add gradients to the pending ones without updating anything.
        """
        unknown = set(grads) - set(self.slots)
        if unknown:
            raise KeyError(
                f"gradients for parameters this optimizer doesn't own: "
                f"{sorted(unknown)}"
            )
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient", name)
            self.slots[name].accumulate(g)
            self._pending.add(name)

    def step(self, grads: Mapping[str, Matrix] | None = None) -> float:
        """
        Apply one update from the pending gradients plus ``grads``.

        Returns:
            Global gradient norm before clipping.
        """
        if grads:
            self.accumulate(grads)
        pending = {
            name: self.slots[name].grad for name in sorted(self._pending)
        }
        clipped, norm = clip_by_global_norm(pending, self.clip_norm)
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, g in clipped.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            slot = self.slots[name]
            slot.value -= (
                self.lr
                * (m / correction1)
                / (np.sqrt(v / correction2) + self.eps)
            )
        for name in pending:
            self.slots[name].zero_grad()
        self._pending.clear()
        return norm
