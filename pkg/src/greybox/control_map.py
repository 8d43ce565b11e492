"""Algebra linking PI-controller parameters, the reduced ODE and the shape signature.

The closed loop of a first-order process ``v' = -v/tau_p + (k_p/tau_p) u`` under
PI control ``u = k_c e + (k_c/tau_I) int e`` with a linear set point
``r(t) = q1 t + q2`` obeys (mass normalised to one)::

    v'' + gamma v' + k v = a t + b

whose solution is the oscillator in :mod:`greybox.oscillator`.  Amplitude and
phase depend on initial conditions that are never observed per step, so they
only ever come from fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError, OverdampedError, SingularConfigurationError
from .oscillator import ShapeSignature

SINGULAR_RTOL = 1e-12


@dataclass(frozen=True)
class ControlParams:
    k_p: float
    k_c: float
    tau_p: float
    tau_I: float
    q1: float = 0.0
    q2: float = 0.0
    u0: float = 0.0

    def __post_init__(self):
        for name in ("k_p", "k_c", "tau_p", "tau_I", "q1", "q2"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        for name in ("k_p", "k_c", "tau_p", "tau_I"):
            if getattr(self, name) == 0:
                raise DomainError(f"{name} must be nonzero")
        if self.u0 != 0:
            raise DomainError("the controller bias u0 is fixed at 0")

    @property
    def loop_gain(self) -> float:
        return self.k_p * self.k_c


@dataclass(frozen=True)
class OdeParams:
    gamma: float
    k: float
    a: float
    b: float

    def __post_init__(self):
        for name in ("gamma", "k", "a", "b"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")


def ode_from_control_output(cp: ControlParams) -> OdeParams:
    """ODE coefficients seen by the controlled output ``v``."""
    kbar = cp.loop_gain
    denom = cp.tau_I * cp.tau_p
    return OdeParams(
        gamma=(1 + kbar) / cp.tau_p,
        k=kbar / denom,
        a=kbar * cp.q1 / denom,
        b=kbar * cp.q1 / cp.tau_p + kbar * cp.q2 / denom,
    )


def ode_from_control_input(cp: ControlParams) -> OdeParams:
    """ODE coefficients seen by the manipulated input ``u``; only the forcing differs."""
    kbar = cp.loop_gain
    denom = cp.tau_I * cp.tau_p
    return OdeParams(
        gamma=(1 + kbar) / cp.tau_p,
        k=kbar / denom,
        a=cp.k_c * cp.q1 / denom,
        b=cp.k_c * (cp.q1 * (cp.tau_p + cp.tau_I) + cp.q2) / denom,
    )


def shape_from_ode(ode: OdeParams) -> tuple[float, float, float]:
    """Return ``(omega, c, y)``.

    Raises :class:`OverdampedError` when ``4k < gamma**2`` (no real frequency).
    """
    if ode.k == 0:
        raise DomainError("k must be nonzero")
    disc = 4 * ode.k - ode.gamma**2
    if disc < 0:
        raise OverdampedError(f"overdamped: 4k - gamma^2 = {disc} < 0")
    omega = math.sqrt(disc) / 2
    c = ode.a / ode.k
    y = (ode.b - c * ode.gamma) / ode.k
    return omega, c, y


def ode_from_signature(s: ShapeSignature) -> OdeParams:
    k = s.omega**2 + s.gamma**2 / 4
    return OdeParams(gamma=s.gamma, k=k, a=s.c * k, b=s.y * k + s.c * s.gamma)


def _is_singular(gamma: float, tik: float) -> bool:
    return abs(gamma - tik) <= SINGULAR_RTOL * max(abs(gamma), abs(tik), 1.0)


def control_from_ode_known(ode: OdeParams, k_c: float, tau_I: float) -> tuple[float, float, float, float]:
    """Recover ``(tau_p, k_p, q1, q2)`` when the controller tuning ``(k_c, tau_I)`` is known."""
    if k_c == 0 or tau_I == 0:
        raise DomainError("k_c and tau_I must be nonzero")
    if ode.k == 0:
        raise DomainError("k must be nonzero")
    tik = tau_I * ode.k
    if _is_singular(ode.gamma, tik):
        raise SingularConfigurationError(f"gamma - tau_I*k = {ode.gamma - tik} is singular")
    gap = ode.gamma - tik
    tau_p = 1 / gap
    k_p = tik / (k_c * gap)
    q1 = ode.a / ode.k
    q2 = (ode.b - tau_I * ode.a) / ode.k
    return tau_p, k_p, q1, q2


def reduce_single_dof(ode: OdeParams, tau_p: float) -> tuple[float, float, float, float]:
    """Express ``(tau_I, kbar, q1, q2)`` as functions of the process time constant alone.

    ``kbar = k_p k_c`` is the loop gain.
    """
    if ode.k == 0 or tau_p == 0:
        raise DomainError("k and tau_p must be nonzero")
    tau_I = (ode.gamma * tau_p - 1) / (ode.k * tau_p)
    kbar = ode.gamma * tau_p - 1
    q1 = ode.a / ode.k
    q2 = (ode.b - tau_I * ode.a) / ode.k
    return tau_I, kbar, q1, q2


def oscillation_bound(cp: ControlParams) -> float:
    """Integral time below which the loop oscillates: ``4 kbar tau_p / (1 + kbar)**2``."""
    kbar = cp.loop_gain
    if kbar == -1:
        return math.inf
    return 4 * kbar * cp.tau_p / (1 + kbar) ** 2


def oscillates(cp: ControlParams) -> bool:
    """True iff the induced closed loop is underdamped (``4k > gamma**2``).

    For ``tau_I > 0`` this is the tuning condition ``tau_I < oscillation_bound(cp)``;
    the discriminant form is used so the two never disagree through rounding.
    """
    ode = ode_from_control_output(cp)
    return 4 * ode.k - ode.gamma**2 > 0


def is_stable(gamma: float, tau_p: float) -> bool:
    """Stability of PI control of a first-order process, ``gamma tau_p - 1 > 0``."""
    return gamma * tau_p - 1 > 0
