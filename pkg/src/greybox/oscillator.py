"""Damped, linearly driven oscillator and its parameter derivatives.

A trace is summarised by seven numbers, the shape signature::

    alpha(t, s) = R exp(-gamma (t - x) / 2) cos(omega (t - x) - phi) + c (t - x) + y

All derivatives are hand-derived closed forms.  With ``tau = t - x``,
``f = R E cos(theta)`` and ``g = R E sin(theta)`` (``E`` the envelope and
``theta = omega tau - phi``) every first and second partial is a short
expression in ``tau, f, g`` which keeps the vectorised versions cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import DomainError

PARAM_NAMES: tuple[str, ...] = ("gamma", "R", "omega", "y", "phi", "c", "x")
IDX = {name: i for i, name in enumerate(PARAM_NAMES)}
N_PARAMS = 7

PHI_BOUND = math.pi / 2


@dataclass(frozen=True)
class ShapeSignature:
    """Seven oscillator parameters summarising one wafer's trace.

    Order is fixed everywhere as ``(gamma, R, omega, y, phi, c, x)``.
    """

    gamma: float
    R: float
    omega: float
    y: float
    phi: float
    c: float
    x: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise DomainError(f"shape signature has non-finite components: {vals}")
        if self.omega < 0:
            raise DomainError(f"omega must be >= 0, got {self.omega}")
        if not -PHI_BOUND <= self.phi <= PHI_BOUND:
            raise DomainError(f"phi must lie in [-pi/2, pi/2], got {self.phi}")

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma, self.R, self.omega, self.y, self.phi, self.c, self.x], dtype=float)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "ShapeSignature":
        a = np.asarray(arr, dtype=float)
        if a.shape != (N_PARAMS,):
            raise DomainError(f"expected 7 parameters, got shape {a.shape}")
        return cls(*(float(v) for v in a))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.as_array().tolist()))

    def replace(self, **changes: float) -> "ShapeSignature":
        d = self.as_dict()
        d.update(changes)
        return ShapeSignature(**d)


@dataclass(frozen=True, eq=False)
class TraceSeries:
    """Sensor readings of one (tool, sensor, step, wafer) quadruple."""

    times: np.ndarray
    values: np.ndarray
    tool_id: str = ""
    sensor_id: str = ""
    step_id: str = ""
    wafer_id: str = ""
    lot_id: str = ""
    sequence_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or z.ndim != 1:
            raise DomainError("times and values must be one-dimensional")
        if t.size < 1:
            raise DomainError("a trace needs at least one observation")
        if t.size != z.size:
            raise DomainError(f"length mismatch: {t.size} times vs {z.size} values")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(z))):
            raise DomainError("trace contains non-finite entries")
        if np.any(np.diff(t) <= 0):
            raise DomainError("times must be strictly increasing")
        t.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", z)

    def __len__(self) -> int:
        return self.times.size

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.tool_id, self.sensor_id, self.step_id)

    def with_values(self, values) -> "TraceSeries":
        return TraceSeries(
            self.times, np.asarray(values, dtype=float), self.tool_id, self.sensor_id,
            self.step_id, self.wafer_id, self.lot_id, self.sequence_index, dict(self.meta),
        )


SignatureLike = Union[ShapeSignature, Sequence[float], np.ndarray]


def as_params(s: SignatureLike) -> np.ndarray:
    """Coerce a signature or 7-vector into a float array, rejecting non-finite input."""
    if isinstance(s, ShapeSignature):
        return s.as_array()
    p = np.asarray(s, dtype=float)
    if p.shape != (N_PARAMS,):
        raise DomainError(f"expected 7 parameters, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise DomainError(f"non-finite parameters: {p}")
    return p


def _times(times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.size == 0:
        raise DomainError("times must be nonempty")
    if not np.all(np.isfinite(t)):
        raise DomainError("times contain non-finite values")
    return t


def _parts(p: np.ndarray, t: np.ndarray):
    gamma, R, omega, _, phi, _, x = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
    tau = t - x
    env = np.exp(-0.5 * gamma * tau)
    theta = omega * tau - phi
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    return tau, env, cos_t, sin_t


def evaluate(s: SignatureLike, t: float) -> float:
    """Value of the oscillator at a single time."""
    if not math.isfinite(float(t)):
        raise DomainError(f"time must be finite, got {t}")
    gamma, R, omega, y, phi, c, x = as_params(s).tolist()
    tau = float(t) - x
    return R * math.exp(-0.5 * gamma * tau) * math.cos(omega * tau - phi) + c * tau + y


def eval_vec(s: SignatureLike, times) -> np.ndarray:
    """Oscillator evaluated at each entry of ``times``, order preserved."""
    p = as_params(s)
    t = _times(times)
    tau, env, cos_t, _ = _parts(p, t)
    return p[1] * env * cos_t + p[5] * tau + p[3]


def jacobian(s: SignatureLike, times) -> np.ndarray:
    """Matrix of first partials, shape ``(len(times), 7)``."""
    p = as_params(s)
    t = _times(times)
    return _jacobian(p, t)


def _jacobian(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    gamma, R, omega, _, _, c, _ = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
    tau, env, cos_t, sin_t = _parts(p, t)
    ec = env * cos_t
    es = env * sin_t
    f = R * ec
    g = R * es
    J = np.empty((t.size, N_PARAMS))
    J[:, 0] = -0.5 * tau * f
    J[:, 1] = ec
    J[:, 2] = -tau * g
    J[:, 3] = 1.0
    J[:, 4] = g
    J[:, 5] = tau
    J[:, 6] = 0.5 * gamma * f + omega * g - c
    return J


def grad_params(s: SignatureLike, t: float) -> np.ndarray:
    """Gradient of ``evaluate(s, t)`` with respect to the seven parameters."""
    return jacobian(s, [t])[0]


def weighted_hessian(s: SignatureLike, times, weights) -> np.ndarray:
    """``sum_i weights[i] * Hessian(alpha(times[i], s))`` as a symmetric 7x7 matrix."""
    p = as_params(s)
    t = _times(times)
    w = np.broadcast_to(np.asarray(weights, dtype=float), t.shape)
    return _weighted_hessian(p, t, w)


_IU = np.triu_indices(N_PARAMS, 1)
_IL = (_IU[1], _IU[0])


def _weighted_hessian(p: np.ndarray, t: np.ndarray, w: np.ndarray) -> np.ndarray:
    tau, env, cos_t, sin_t = _parts(p, t)
    return _hessian_from_parts(p, tau, env * cos_t, env * sin_t, w)


def _hessian_from_parts(p, tau, ec, es, w):
    gamma, R, omega = p[0], p[1], p[2]
    f = R * ec
    g = R * es
    wt = w * tau
    wtt = wt * tau
    sf, sg = w @ f, w @ g
    stf, stg = wt @ f, wt @ g
    sttf, sttg = wtt @ f, wtt @ g
    sec, ses = w @ ec, w @ es
    stec, stes = wt @ ec, wt @ es

    H = np.zeros((N_PARAMS, N_PARAMS))
    # gamma row
    H[0, 0] = 0.25 * sttf
    H[0, 1] = -0.5 * stec
    H[0, 2] = 0.5 * sttg
    H[0, 4] = -0.5 * stg
    H[0, 6] = 0.5 * sf - 0.5 * (0.5 * gamma * stf + omega * stg)
    # R row
    H[1, 2] = -stes
    H[1, 4] = ses
    H[1, 6] = 0.5 * gamma * sec + omega * ses
    # omega row
    H[2, 2] = -sttf
    H[2, 4] = stf
    H[2, 6] = sg + omega * stf - 0.5 * gamma * stg
    # phi row
    H[4, 4] = -sf
    H[4, 6] = 0.5 * gamma * sg - omega * sf
    # c row
    H[5, 6] = -w.sum()
    # x row
    H[6, 6] = (0.25 * gamma * gamma - omega * omega) * sf + gamma * omega * sg
    H[_IL] = H[_IU]
    return H


def residual_derivatives(p: np.ndarray, t: np.ndarray, z: np.ndarray):
    """Residuals ``z - alpha``, the Jacobian of ``alpha`` and ``sum_i r_i Hess(alpha_i)`` in one pass."""
    gamma, R, omega, y, _, c, _ = p
    tau, env, cos_t, sin_t = _parts(p, t)
    ec = env * cos_t
    es = env * sin_t
    f = R * ec
    g = R * es
    r = z - (f + c * tau + y)
    J = np.empty((t.size, N_PARAMS))
    J[:, 0] = -0.5 * tau * f
    J[:, 1] = ec
    J[:, 2] = -tau * g
    J[:, 3] = 1.0
    J[:, 4] = g
    J[:, 5] = tau
    J[:, 6] = 0.5 * gamma * f + omega * g - c
    return r, J, _hessian_from_parts(p, tau, ec, es, r)


def hess_params(s: SignatureLike, t: float) -> np.ndarray:
    """Symmetric 7x7 matrix of second partials of ``evaluate(s, t)``."""
    return weighted_hessian(s, [t], [1.0])


def residuals(s: SignatureLike, trace: TraceSeries) -> np.ndarray:
    return trace.values - eval_vec(s, trace.times)


def ssr(s: SignatureLike, trace: TraceSeries) -> float:
    """Sum of squared residuals between the trace and the oscillator."""
    r = residuals(s, trace)
    return float(r @ r)
