"""Concave utilities and the ingredients the solver needs from them.

Two families are supported:

* logarithmic, ``u(z) = log(z + eta)``
* exponential, ``u(z) = 1 - exp(-(a*z + eta))``

The conjugate used throughout is the concave one,

    u*(theta) = inf_z { theta*z - u(z) },

which is finite only for ``theta > 0`` and satisfies the Fenchel-Young
inequality ``u(z) + u*(theta) <= theta*z`` with equality at
``theta = u'(z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from spo.errors import DomainError, ParameterError


class Family(str, Enum):
    LOG = "log"
    EXP = "exp"


@dataclass(frozen=True)
class UtilitySpec:
    """A utility family with its shift ``eta`` and risk aversion ``a``.

    ``a`` is ignored by the logarithmic family.
    """

    family: Family
    eta: float = 1.0
    a: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not math.isfinite(self.eta) or self.eta < 0:
            raise ParameterError(f"eta must be finite and >= 0, got {self.eta}")
        if self.family is Family.EXP and not (self.a > 0 and math.isfinite(self.a)):
            raise ParameterError(f"risk aversion a must be > 0, got {self.a}")

    @classmethod
    def log(cls, eta: float = 1.0) -> "UtilitySpec":
        return cls(Family.LOG, eta=eta)

    @classmethod
    def exp(cls, a: float = 1.0, eta: float = 0.0) -> "UtilitySpec":
        return cls(Family.EXP, eta=eta, a=a)

    @property
    def label(self) -> str:
        if self.family is Family.LOG:
            return "LOG"
        return f"EXP-{self.a:.2f}"

    def require_solver_ready(self):
        # u'(0) must be finite for lambda_max, the step size and the dual radius
        if self.family is Family.LOG and self.eta <= 0:
            raise DomainError("logarithmic utility needs eta > 0 inside the solver")

    # -- vectorized kernels; no domain checks beyond what numpy does -----

    def _check_z(self, z):
        if self.family is Family.LOG and np.any(z + self.eta <= 0):
            raise DomainError("log utility evaluated at z + eta <= 0")

    def value(self, z):
        z = np.asarray(z, dtype=float)
        self._check_z(z)
        if self.family is Family.LOG:
            return np.log(z + self.eta)
        return -np.expm1(-(self.a * z + self.eta))

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        self._check_z(z)
        if self.family is Family.LOG:
            return 1.0 / (z + self.eta)
        return self.a * np.exp(-(self.a * z + self.eta))

    def hess(self, z):
        """Second derivative, always negative."""
        z = np.asarray(z, dtype=float)
        self._check_z(z)
        if self.family is Family.LOG:
            return -1.0 / (z + self.eta) ** 2
        return -self.a**2 * np.exp(-(self.a * z + self.eta))

    def conjugate(self, theta):
        """Concave conjugate; ``-inf`` where ``theta <= 0``."""
        theta = np.asarray(theta, dtype=float)
        out = np.full(theta.shape, -np.inf)
        pos = theta > 0
        t = theta[pos]
        if self.family is Family.LOG:
            out[pos] = np.log(t) - self.eta * t + 1.0
        else:
            s = t / self.a
            out[pos] = -s * np.log(s) + s - s * self.eta - 1.0
        return out if out.ndim else float(out)

    def lipschitz(self) -> tuple[float, float]:
        """Bounds on ``|u'|`` and ``|u''|`` over ``z >= 0``.

        Both derivatives are monotone in ``|.|`` so the bounds sit at ``z = 0``.
        """
        self.require_solver_ready()
        if self.family is Family.LOG:
            return 1.0 / self.eta, 1.0 / self.eta**2
        e = math.exp(-self.eta)
        return self.a * e, self.a**2 * e


def utility_value(spec: UtilitySpec, z: float) -> float:
    return float(spec.value(z))


def utility_grad(spec: UtilitySpec, z: float) -> float:
    return float(spec.grad(z))


def conjugate_value(spec: UtilitySpec, theta: float) -> float:
    if not theta > 0:
        raise DomainError(f"conjugate is finite only for theta > 0, got {theta}")
    return float(spec.conjugate(theta))


def lipschitz_constants(spec: UtilitySpec) -> tuple[float, float]:
    """Return ``(L_u, L_grad_u)`` for the scalar utility."""
    return spec.lipschitz()
