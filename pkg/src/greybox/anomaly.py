"""Normal model, anomaly score and gradient-based deconstruction.

The anomaly score of a signature ``s`` for a trace is the negative log joint
of trace and signature under frozen hyperparameters ``(sigma*, mu*, sigma_S*)``::

    n ln(sigma*^2)/2 + ssr/(2 sigma*^2) + sum_d ln sigma*_S,d + 1/2 sum_d w_d (s_d - mu*_d)^2

with ``w_d = 1/sigma*_S,d^2`` (or ``1/sigma*_S,d`` in the literal "std" mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import oscillator as osc
from .errors import DomainError
from .fit import FitConfig, Hyperparams, LotFit, fit_lot, prior_weights
from .oscillator import N_PARAMS, PARAM_NAMES, ShapeSignature, TraceSeries

MIN_NORMAL_WAFERS = 8


@dataclass(frozen=True, eq=False)
class NormalModel:
    sigma_star: float
    mu_star: np.ndarray
    sigma_star_S: np.ndarray
    source_lots: tuple[str, ...]
    triple: tuple[str, str, str]
    prior_exponent: str = "variance"

    def __post_init__(self):
        mu = np.array(self.mu_star, dtype=float).reshape(N_PARAMS)
        sd = np.array(self.sigma_star_S, dtype=float).reshape(N_PARAMS)
        if not (self.sigma_star > 0 and np.all(sd > 0)):
            raise DomainError("normal model standard deviations must be positive")
        if not (math.isfinite(self.sigma_star) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
            raise DomainError("normal model must be finite")
        if not self.source_lots:
            raise DomainError("normal model needs at least one source lot")
        if self.prior_exponent not in ("variance", "std"):
            raise DomainError(f"unknown prior_exponent {self.prior_exponent!r}")
        mu.setflags(write=False)
        sd.setflags(write=False)
        object.__setattr__(self, "sigma_star", float(self.sigma_star))
        object.__setattr__(self, "mu_star", mu)
        object.__setattr__(self, "sigma_star_S", sd)
        object.__setattr__(self, "source_lots", tuple(str(s) for s in self.source_lots))
        object.__setattr__(self, "triple", tuple(str(s) for s in self.triple))

    @property
    def hyper(self) -> Hyperparams:
        return Hyperparams(self.sigma_star, self.mu_star, self.sigma_star_S)

    @property
    def weights(self) -> np.ndarray:
        return prior_weights(self.sigma_star_S, self.prior_exponent)

    def baseline(self, n: int) -> float:
        """Score of a perfect fit at ``s = mu*`` for a trace with ``n`` points."""
        return 0.5 * math.log(self.sigma_star**2) * n + float(np.sum(np.log(self.sigma_star_S)))

    def __eq__(self, other):
        return (isinstance(other, NormalModel) and self.sigma_star == other.sigma_star
                and np.array_equal(self.mu_star, other.mu_star)
                and np.array_equal(self.sigma_star_S, other.sigma_star_S)
                and self.source_lots == other.source_lots and self.triple == other.triple
                and self.prior_exponent == other.prior_exponent)


@dataclass(frozen=True, eq=False)
class AnomalyRecord:
    wafer_id: str
    sequence_index: int
    score: float
    ssr: float
    gradient: np.ndarray
    signature: ShapeSignature
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.array(self.gradient, dtype=float).reshape(N_PARAMS)
        if not math.isfinite(self.score):
            raise DomainError("anomaly score must be finite")
        g.setflags(write=False)
        object.__setattr__(self, "gradient", g)


def fit_normal_model(initial_traces: Sequence[TraceSeries], cfg: FitConfig = FitConfig()) -> tuple[NormalModel, LotFit]:
    """Pooled fit over the initial wafers (any number of lots) whose hyperparameters become the normal model."""
    traces = list(initial_traces)
    if len(traces) < MIN_NORMAL_WAFERS:
        raise DomainError(f"the normal model needs at least {MIN_NORMAL_WAFERS} wafers, got {len(traces)}")
    lf = fit_lot(traces, cfg, require_same_lot=False)
    lots = tuple(sorted({tr.lot_id for tr in traces}))
    nm = NormalModel(lf.hyper.sigma, lf.hyper.mu_S, lf.hyper.sigma_S, lots, traces[0].triple,
                     cfg.prior_exponent)
    return nm, lf


def _check(s, trace: TraceSeries) -> np.ndarray:
    if not isinstance(trace, TraceSeries):
        raise DomainError("expected a TraceSeries")
    return osc.as_params(s)


def score(s: osc.SignatureLike, trace: TraceSeries, nm: NormalModel) -> float:
    p = _check(s, trace)
    d = p - nm.mu_star
    data = osc.ssr(p, trace) / (2 * nm.sigma_star**2)
    return nm.baseline(len(trace)) + data + 0.5 * float(nm.weights @ (d * d))


def score_gradient(s: osc.SignatureLike, trace: TraceSeries, nm: NormalModel) -> np.ndarray:
    """Gradient of :func:`score` over all seven components, ``x`` included."""
    p = _check(s, trace)
    r = osc.residuals(p, trace)
    J = osc.jacobian(p, trace.times)
    return -(J.T @ r) / nm.sigma_star**2 + nm.weights * (p - nm.mu_star)


def score_hessian(s: osc.SignatureLike, trace: TraceSeries, nm: NormalModel) -> np.ndarray:
    p = _check(s, trace)
    r, J, rH = osc.residual_derivatives(p, trace.times, trace.values)
    H = (J.T @ J - rH) / nm.sigma_star**2
    H[np.diag_indices(N_PARAMS)] += nm.weights
    return 0.5 * (H + H.T)


def changepoint_gradient(s_bef: osc.SignatureLike, s_aft: osc.SignatureLike, trace_bef: TraceSeries,
                         nm: NormalModel) -> np.ndarray:
    """First-order Taylor estimate of the score gradient halfway between two signatures."""
    pb = _check(s_bef, trace_bef)
    step = osc.as_params(s_aft) - pb
    g = score_gradient(pb, trace_bef, nm)
    if not np.any(step):
        return g
    return g + score_hessian(pb, trace_bef, nm) @ (step / 2)


def score_wafer(signature: ShapeSignature, trace: TraceSeries, nm: NormalModel) -> AnomalyRecord:
    return AnomalyRecord(
        wafer_id=trace.wafer_id,
        sequence_index=trace.sequence_index,
        score=score(signature, trace, nm),
        ssr=osc.ssr(signature, trace),
        gradient=score_gradient(signature, trace, nm),
        signature=signature,
    )


# ---------------------------------------------------------------------------- monitoring


def _zscore(block: np.ndarray) -> np.ndarray:
    mean = block.mean(axis=0)
    sd = block.std(axis=0)
    out = np.zeros_like(block)
    ok = sd >= 1e-12
    out[:, ok] = (block[:, ok] - mean[ok]) / sd[ok]
    return out


def standardize(matrix, window: int | None = None) -> np.ndarray:
    """Column-wise z-scores (population std) over time.

    With ``window`` set, row ``i`` is standardized against the trailing
    ``window`` rows ending at ``i``.
    """
    X = np.asarray(matrix, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 2:
        raise DomainError("standardize needs a 2-D matrix with at least two rows")
    if window is None:
        return _zscore(X)
    if window < 2:
        raise DomainError("window must be at least 2")
    out = np.zeros_like(X)
    for i in range(X.shape[0]):
        block = X[max(0, i - window + 1): i + 1]
        if block.shape[0] >= 2:
            out[i] = _zscore(block)[-1]
    return out


def detect_spikes(series, z_threshold: float = 3.0) -> list[int]:
    """Indices standing out above ``z_threshold`` while both neighbours stay below half of it.

    End points only need their single neighbour to be low.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 5:
        raise DomainError("spike detection needs at least 5 values")
    z = standardize(x)[:, 0]
    half = z_threshold / 2
    hits = []
    for i in range(z.size):
        if z[i] <= z_threshold:
            continue
        left_ok = i == 0 or z[i - 1] < half
        right_ok = i == z.size - 1 or z[i + 1] < half
        if left_ok and right_ok:
            hits.append(i)
    return hits


def shift_statistics(series, window: int = 8) -> np.ndarray:
    """``|mean(after) - mean(before)| / pooled std`` for each split index (NaN where undefined)."""
    x = np.asarray(series, dtype=float).ravel()
    stats = np.full(x.size, np.nan)
    for i in range(window, x.size - window + 1):
        before = x[i - window: i]
        after = x[i: i + window]
        diff = abs(after.mean() - before.mean())
        pooled = math.sqrt(0.5 * (before.var() + after.var()))
        if pooled > 0:
            stats[i] = diff / pooled
        else:
            tiny = 1e-12 * max(1.0, abs(before.mean()), abs(after.mean()))
            stats[i] = math.inf if diff > tiny else 0.0
    return stats


def detect_changepoints(series, window: int = 8, z_threshold: float = 3.0) -> list[int]:
    """First indices of persistent level shifts.

    Exceedances are taken strongest first; any within ``window`` of an
    already reported index is suppressed.
    """
    x = np.asarray(series, dtype=float).ravel()
    if window < 2:
        raise DomainError("window must be at least 2")
    if x.size < 2 * window:
        raise DomainError(f"change-point detection needs at least {2 * window} values")
    stats = shift_statistics(x, window)
    cand = [i for i in range(x.size) if stats[i] > z_threshold]
    cand.sort(key=lambda i: (-stats[i], i))
    chosen: list[int] = []
    for i in cand:
        if all(abs(i - j) > window for j in chosen):
            chosen.append(i)
    return sorted(chosen)


def rank_contributors(gradient) -> list[tuple[str, float]]:
    """Parameters ordered by descending ``|d score / d param|``; ties keep parameter order."""
    g = np.asarray(gradient, dtype=float).ravel()
    if g.size != N_PARAMS:
        raise DomainError(f"gradient must have {N_PARAMS} entries")
    order = sorted(range(N_PARAMS), key=lambda i: -abs(g[i]))
    return [(PARAM_NAMES[i], float(g[i])) for i in order]
