"""Small evaluable fields sharing the ``evaluate(t, z, zT, condition)`` interface."""
from __future__ import annotations

import numpy as np

from .bridge import FieldOutput


class CallableField:
    """Wrap a plain ``f(t, z, zT) -> velocity`` function."""

    has_score = False

    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, t, z, zT, condition=None) -> FieldOutput:
        return FieldOutput(velocity=np.asarray(self.fn(t, z, zT), dtype=float))

    def __call__(self, t, z, zT, condition=None):
        return self.evaluate(t, z, zT, condition).velocity


class ZeroField(CallableField):
    def __init__(self):
        super().__init__(lambda t, z, zT: np.zeros_like(np.asarray(z, dtype=float)))


class LinearField(CallableField):
    """``v(t, z) = A z`` with ``A`` a scalar or a (d, d) matrix."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        super().__init__(self._apply)

    def _apply(self, t, z, zT):
        z = np.asarray(z, dtype=float)
        if self.matrix.ndim == 0:
            return self.matrix * z
        return z @ self.matrix.T


class PerturbedField:
    """Base field plus a state-independent perturbation ``e(t)``.

    The perturbation does not change the Lipschitz constant in ``z`` and its
    squared norm integral is known exactly, which is what the bound checks need.
    Score and posterior mean are dropped since they no longer match the drift.
    """

    has_score = False

    def __init__(self, base, perturbation):
        self.base = base
        self.perturbation = perturbation

    def evaluate(self, t, z, zT, condition=None) -> FieldOutput:
        v = self.base.evaluate(t, z, zT, condition).velocity
        return FieldOutput(velocity=v + self.perturbation(t))

    def __call__(self, t, z, zT, condition=None):
        return self.evaluate(t, z, zT, condition).velocity


def as_field(obj):
    if hasattr(obj, "evaluate"):
        return obj
    if callable(obj):
        return CallableField(obj)
    raise TypeError(f"cannot use {type(obj).__name__} as a velocity field")
