"""Pointwise losses ``l(y, t)`` with first and second derivatives in ``t``.

* ``squared``:  0.5 * (t - y)**2
* ``logistic``: log(1 + exp(-y t)), labels in {-1, +1}
* ``bce``:      -y log s(t) - (1 - y) log(1 - s(t)), labels in {0, 1}

All methods accept scalars or arrays and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError

KINDS = ("squared", "logistic", "bce")


@dataclass(frozen=True)
class LossFunction:
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown loss {self.kind!r}; expected one of {KINDS}")

    def value(self, y, t):
        y = np.asarray(y, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "squared":
            return 0.5 * (t - y) ** 2
        if self.kind == "logistic":
            return np.logaddexp(0.0, -y * t)
        # -log s(t) = softplus(-t), -log(1 - s(t)) = softplus(t)
        return y * np.logaddexp(0.0, -t) + (1.0 - y) * np.logaddexp(0.0, t)

    def derivative(self, y, t):
        y = np.asarray(y, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "squared":
            return t - y
        if self.kind == "logistic":
            return -y * expit(-y * t)
        return expit(t) - y

    def second_derivative(self, y, t):
        y = np.asarray(y, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "squared":
            return np.ones(np.broadcast(y, t).shape)
        if self.kind == "logistic":
            s = expit(y * t)
            return y * y * s * (1.0 - s)
        s = expit(t)
        return s * (1.0 - s) + 0.0 * y

    # Curvature bound on l'' used for step sizes; logistic/bce assume |y| <= 1.
    @property
    def curvature_bound(self):
        return 1.0 if self.kind == "squared" else 0.25


SQUARED = LossFunction("squared")
LOGISTIC = LossFunction("logistic")
BCE = LossFunction("bce")


def get_loss(kind):
    if isinstance(kind, LossFunction):
        return kind
    return LossFunction(kind)
