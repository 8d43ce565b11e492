"""Lot-wise MAP estimation of shape signatures.

Each lot is fitted by block coordinate descent on the negative log joint

    sum_m [ n_m ln(sigma^2)/2 + ssr_m / (2 sigma^2)
            + sum_d ln(sigma_S[d]) + 1/2 sum_d (s_m[d] - mu_S[d])^2 / sigma_S[d]^2 ]

alternating a box-constrained modified-Newton refinement of every wafer's
signature (hyperparameters fixed) with the closed-form hyperparameter update
(signatures fixed).  ``x`` is pinned to each trace's first time stamp and never
searched over, but it still takes part in the prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from . import oscillator as osc
from ._kernels import damped_direction, wafer_fgh, wafer_value
from .errors import DomainError, NonFiniteObjectiveError
from .oscillator import N_PARAMS, PHI_BOUND, ShapeSignature, TraceSeries

FREE = np.arange(6)  # gamma, R, omega, y, phi, c; x (index 6) stays fixed
I_GAMMA, I_R, I_OMEGA, I_Y, I_PHI, I_C, I_X = range(7)
PRIOR_EXPONENTS = ("variance", "std")
_BOUND_EPS = 1e-12


@dataclass(frozen=True)
class FitConfig:
    newton_tol: float = 1e-8
    newton_max_iters: int = 200
    bcd_tol: float = 1e-6
    bcd_max_rounds: int = 50
    damping_init: float = 1e-3
    sigma_floor: float = 1e-6
    sigma_S_floor: float = 1e-4
    multistart_count: int = 3
    prior_exponent: str = "variance"
    # width of the uninformative starting prior, in the same standardized units as the floors
    initial_prior_scale: float = 10.0

    def __post_init__(self):
        for name in ("newton_tol", "newton_max_iters", "bcd_tol", "bcd_max_rounds", "damping_init",
                     "sigma_floor", "sigma_S_floor", "multistart_count", "initial_prior_scale"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.prior_exponent not in PRIOR_EXPONENTS:
            raise DomainError(f"prior_exponent must be one of {PRIOR_EXPONENTS}")


@dataclass(frozen=True, eq=False)
class Hyperparams:
    """Noise std plus per-component prior mean and std, in (gamma, R, omega, y, phi, c, x) order."""

    sigma: float
    mu_S: np.ndarray
    sigma_S: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu_S, dtype=float).reshape(N_PARAMS)
        sd = np.array(self.sigma_S, dtype=float).reshape(N_PARAMS)
        if not (self.sigma > 0 and np.all(sd > 0)):
            raise DomainError("sigma and sigma_S must be positive")
        if not (math.isfinite(self.sigma) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
            raise DomainError("hyperparameters must be finite")
        mu.setflags(write=False)
        sd.setflags(write=False)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "mu_S", mu)
        object.__setattr__(self, "sigma_S", sd)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.sigma], self.mu_S, self.sigma_S])

    def __eq__(self, other):
        return isinstance(other, Hyperparams) and np.array_equal(self.as_vector(), other.as_vector())


@dataclass(eq=False)
class LotFit:
    signatures: list[ShapeSignature]
    hyper: Hyperparams
    objective_history: list[float]
    per_wafer_ssr: np.ndarray
    converged: bool
    rounds: int
    wafer_ids: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------- scales


def data_units(traces: Sequence[TraceSeries]) -> tuple[float, float]:
    """``(value scale, time scale)`` used to express floors in standardized units."""
    vals = np.concatenate([tr.values for tr in traces])
    z_scale = float(np.std(vals)) if vals.size > 1 else 0.0
    spans = [tr.times[-1] - tr.times[0] for tr in traces if len(tr) > 1]
    t_scale = float(np.median(spans)) if spans else 0.0
    return (z_scale if z_scale > 0 else 1.0), (t_scale if t_scale > 0 else 1.0)


def component_units(z_scale: float, t_scale: float) -> np.ndarray:
    return np.array([1 / t_scale, z_scale, 1 / t_scale, z_scale, 1.0, z_scale / t_scale, t_scale])


def floors(traces: Sequence[TraceSeries], cfg: FitConfig) -> tuple[float, np.ndarray]:
    z_scale, t_scale = data_units(traces)
    return cfg.sigma_floor * z_scale, cfg.sigma_S_floor * component_units(z_scale, t_scale)


def prior_weights(sigma_S: np.ndarray, prior_exponent: str = "variance") -> np.ndarray:
    """Curvature of the prior quadratic per component."""
    if prior_exponent == "variance":
        return 1.0 / np.square(sigma_S)
    if prior_exponent == "std":
        return 1.0 / np.asarray(sigma_S)
    raise DomainError(f"unknown prior_exponent {prior_exponent!r}")


# ---------------------------------------------------------------------------- objective


def neg_log_joint(signatures: Sequence[osc.SignatureLike], hyper: Hyperparams,
                  traces: Sequence[TraceSeries], prior_exponent: str = "variance") -> float:
    """Negative log joint of a lot, additive ``2 pi`` constants dropped."""
    if len(signatures) != len(traces):
        raise DomainError("need one signature per trace")
    if not hyper.sigma > 0:
        raise DomainError("sigma must be positive")
    var = hyper.sigma**2
    w = prior_weights(hyper.sigma_S, prior_exponent)
    log_sd = float(np.sum(np.log(hyper.sigma_S)))
    total = 0.0
    for s, tr in zip(signatures, traces):
        p = osc.as_params(s)
        d = p - hyper.mu_S
        total += 0.5 * math.log(var) * len(tr) + osc.ssr(p, tr) / (2 * var)
        total += log_sd + 0.5 * float(w @ (d * d))
    return total


class WaferProblem:
    """Single-wafer objective ``ssr/(2 sigma^2) + prior quadratic`` over the 6 free components."""

    def __init__(self, trace: TraceSeries, hyper: Hyperparams | None, prior_exponent: str = "variance"):
        self.t = np.ascontiguousarray(trace.times)
        self.z = np.ascontiguousarray(trace.values)
        self.set_hyper(hyper, prior_exponent)

    def set_hyper(self, hyper: Hyperparams | None, prior_exponent: str = "variance"):
        if hyper is None:
            # flat prior, unit noise: plain least squares
            self.inv_var = 1.0
            self.mu = np.zeros(N_PARAMS)
            self.w = np.zeros(N_PARAMS)
            return
        self.inv_var = 1.0 / hyper.sigma**2
        self.mu = np.ascontiguousarray(hyper.mu_S)
        self.w = np.ascontiguousarray(prior_weights(hyper.sigma_S, prior_exponent))

    def value(self, p: np.ndarray) -> float:
        f = wafer_value(p, self.t, self.z, self.inv_var, self.mu, self.w)
        return f if math.isfinite(f) else math.inf

    def derivatives(self, p: np.ndarray):
        # the value is re-evaluated so every comparison in a search uses one arithmetic
        _, g, H = wafer_fgh(p, self.t, self.z, self.inv_var, self.mu, self.w)
        return self.value(p), g, H


def project(p: np.ndarray) -> np.ndarray:
    q = p.copy()
    if q[I_OMEGA] < 0:
        q[I_OMEGA] = 0.0
    q[I_PHI] = min(max(q[I_PHI], -PHI_BOUND), PHI_BOUND)
    return q


def _active_mask(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    act = np.zeros(6, dtype=bool)
    act[I_OMEGA] = p[I_OMEGA] <= _BOUND_EPS and g[I_OMEGA] > 0
    act[I_PHI] = (p[I_PHI] >= PHI_BOUND - _BOUND_EPS and g[I_PHI] < 0) or (
        p[I_PHI] <= -PHI_BOUND + _BOUND_EPS and g[I_PHI] > 0)
    return act


def _modified_cholesky_solve(H: np.ndarray, g: np.ndarray, lam0: float) -> np.ndarray:
    """Newton direction for ``H + lam I``, growing ``lam`` from ``lam0`` until positive definite."""
    return damped_direction(H, g, np.ones(g.size, dtype=np.bool_), lam0)


def _newton(prob: WaferProblem, p0: np.ndarray, cfg: FitConfig) -> tuple[np.ndarray, float, int]:
    p = project(np.array(p0, dtype=float))
    f, g, H = prob.derivatives(p)
    if not math.isfinite(f):
        raise NonFiniteObjectiveError("objective is non-finite at the starting point", last_good=p)
    it = 0
    for it in range(1, cfg.newton_max_iters + 1):
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            raise NonFiniteObjectiveError("non-finite derivatives during Newton search", last_good=p)
        act = _active_mask(p, g)
        if act[I_PHI]:
            # (R, phi) and (-R, phi -+ pi) describe the same curve; hop across the box edge
            q = p.copy()
            q[I_R] = -q[I_R]
            q[I_PHI] = q[I_PHI] - math.pi if q[I_PHI] > 0 else q[I_PHI] + math.pi
            fq = prob.value(q)
            if fq <= f:
                p = q
                f, g, H = prob.derivatives(p)
                act = _active_mask(p, g)
        free = ~act
        direction = damped_direction(H, g, free, cfg.damping_init)
        if g @ direction >= 0:
            direction = np.where(free, -g, 0.0)
        accepted = False
        for d in (direction, np.where(free, -g, 0.0)):
            step = 1.0
            for _ in range(60):
                trial = p.copy()
                trial[:6] += step * d
                trial = project(trial)
                ft = prob.value(trial)
                if math.isfinite(ft) and ft <= f + 1e-4 * float(g @ (trial[:6] - p[:6])):
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if not accepted or ft >= f:
            break
        decrease = f - ft
        p = trial
        f_old, f = f, ft
        if decrease <= cfg.newton_tol * max(abs(f_old), 1e-300):
            break
        f, g, H = prob.derivatives(p)
    return p, f, it


def newton_refine(s0: osc.SignatureLike, trace: TraceSeries, hyper: Hyperparams,
                  cfg: FitConfig = FitConfig()) -> ShapeSignature:
    """Minimise the single-wafer objective from ``s0`` with ``x`` held fixed."""
    p0 = osc.as_params(s0)
    prob = WaferProblem(trace, hyper, cfg.prior_exponent)
    p, _, _ = _newton(prob, p0, cfg)
    return ShapeSignature.from_array(p)


def _refine_best(prob: WaferProblem, p0: np.ndarray, omegas: Sequence[float], cfg: FitConfig) -> np.ndarray:
    best_p, best_f, _ = _newton(prob, p0, cfg)
    for om in omegas:
        start = p0.copy()
        start[I_OMEGA] = om
        try:
            p, f, _ = _newton(prob, start, cfg)
        except NonFiniteObjectiveError:
            continue
        if f < best_f:
            best_p, best_f = p, f
    return best_p


def fit_trace(trace: TraceSeries, cfg: FitConfig = FitConfig()) -> ShapeSignature:
    """Least-squares fit of a single trace with no prior (``x`` pinned to the first time stamp).

    Needs at least six observations; with fewer the problem is underdetermined
    and a lot fit should be used instead.
    """
    if len(trace) < 6:
        raise DomainError(f"a lone trace needs at least 6 observations, got {len(trace)}")
    prob = WaferProblem(trace, None)
    p0 = init_signature(trace).as_array()
    return ShapeSignature.from_array(_refine_best(prob, p0, omega_candidates(trace, cfg.multistart_count)[0], cfg))


def _lot_objective(problems: Sequence[WaferProblem], P: np.ndarray, mu: np.ndarray, hyper: Hyperparams) -> float:
    """Lot objective in the same arithmetic the Newton searches use for acceptance."""
    log_sigma = math.log(hyper.sigma)
    log_sd = float(np.sum(np.log(hyper.sigma_S)))
    total = 0.0
    for prob, p in zip(problems, P):
        total += (prob.t.size * log_sigma + log_sd) + wafer_value(p, prob.t, prob.z, prob.inv_var, mu, prob.w)
    return total if math.isfinite(total) else math.inf


def _common_shift(problems: Sequence[WaferProblem], P: np.ndarray, hyper: Hyperparams, f: float,
                  cfg: FitConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """Move every signature and the prior mean by one shared offset.

    A common offset leaves each ``s_m - mu_S`` unchanged, so only the data
    terms move.  This is the direction in which alternating updates crawl
    when a prior component sits at its floor.
    """
    zeros = np.zeros(N_PARAMS)
    mu = np.array(hyper.mu_S)
    for _ in range(cfg.newton_max_iters):
        g = np.zeros(6)
        H = np.zeros((6, 6))
        for prob, p in zip(problems, P):
            _, gm, Hm = wafer_fgh(p, prob.t, prob.z, prob.inv_var, zeros, zeros)
            g += gm
            H += Hm
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            break
        d = damped_direction(H, g, np.ones(6, dtype=np.bool_), cfg.damping_init)
        step, accepted = 1.0, False
        for _ in range(60):
            delta = np.zeros(N_PARAMS)
            delta[:6] = step * d
            trial = np.array([project(p + delta) for p in P])
            ft = _lot_objective(problems, trial, mu + delta, hyper)
            if ft < f and ft <= f + 1e-4 * step * float(g @ d):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        P, mu, f_old, f = trial, mu + delta, f, ft
        if f_old - f <= cfg.newton_tol * max(abs(f_old), 1e-300):
            break
    return P, mu, f


# ---------------------------------------------------------------------------- initialisation


def _uniform_residual(t: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, float]:
    n = t.size
    grid = np.linspace(t[0], t[-1], n)
    return np.interp(grid, t, r), (t[-1] - t[0]) / (n - 1)


def omega_candidates(trace: TraceSeries, count: int = 3) -> tuple[list[float], bool]:
    """Angular frequencies of the strongest spectral peaks of the detrended trace.

    Returns ``(candidates, dominant)`` where ``dominant`` says whether the top
    peak stands clear of the spectral noise floor.
    """
    t, z = trace.times, trace.values
    if t.size < 4:
        return [], False
    c, y = _tail_line(t - t[0], z)
    r = z - (c * (t - t[0]) + y)
    u, dt = _uniform_residual(t, r)
    u = u - u.mean()
    nfft = 4 * u.size
    power = np.abs(np.fft.rfft(u, nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, d=dt)
    if power.size < 3 or not np.any(power[1:] > 0):
        return [], False
    inner = power[1:-1]
    peaks = np.flatnonzero((inner > power[:-2]) & (inner >= power[2:])) + 1
    peaks = peaks[np.argsort(-power[peaks], kind="stable")][:count]
    cands = [float(2 * math.pi * freqs[i]) for i in peaks]
    floor = float(np.median(power[1:]))
    dominant = bool(peaks.size and power[peaks[0]] > 4.0 * floor)
    return cands, dominant


def _tail_line(tau: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    n = tau.size
    sel = slice(n // 2, n) if n - n // 2 >= 2 else slice(0, n)
    tt, zz = tau[sel], z[sel]
    if tt.size < 2 or np.ptp(tt) == 0:
        return 0.0, float(np.mean(z))
    A = np.column_stack([tt, np.ones_like(tt)])
    (c, y), *_ = np.linalg.lstsq(A, zz, rcond=None)
    return float(c), float(y)


def _envelope_decay(tau: np.ndarray, r: np.ndarray) -> float | None:
    a = np.abs(r)
    if a.size < 3:
        return None
    noise = 1.4826 * float(np.median(np.abs(np.diff(r)))) / math.sqrt(2)
    idx, _ = find_peaks(a)
    if a[0] >= a[1]:
        idx = np.concatenate([[0], idx])
    idx = idx[a[idx] > 3 * noise]
    if idx.size < 2:
        return None
    h, tt = a[idx], tau[idx]
    rates = 2 * np.log(h[:-1] / h[1:]) / np.diff(tt)
    rates = rates[np.isfinite(rates)]
    return float(np.median(rates)) if rates.size else None


def init_signature(trace: TraceSeries, prior_mean: osc.SignatureLike | None = None) -> ShapeSignature:
    """Cheap starting point for the Newton search."""
    t, z = trace.times, trace.values
    x = float(t[0])
    if t.size < 2:
        if prior_mean is None:
            raise DomainError("a single-point trace needs a prior mean to initialise from")
        p = osc.as_params(prior_mean).copy()
        p[I_X] = x
        return ShapeSignature.from_array(project(p))
    tau = t - x
    c, y = _tail_line(tau, z)
    r = z - (c * tau + y)
    gamma = _envelope_decay(tau, r)
    cands, dominant = omega_candidates(trace, 1)
    omega = cands[0] if (cands and dominant) else 0.0
    return ShapeSignature(gamma=0.1 if gamma is None else gamma, R=float(r[0]), omega=omega,
                          y=y, phi=0.0, c=c, x=x)


# ---------------------------------------------------------------------------- hyperparameters


def update_hyperparams(signatures: Sequence[osc.SignatureLike], traces: Sequence[TraceSeries],
                       cfg: FitConfig = FitConfig()) -> Hyperparams:
    """Closed-form minimiser of :func:`neg_log_joint` over the hyperparameters."""
    if len(signatures) < 1 or len(signatures) != len(traces):
        raise DomainError("need at least one wafer and one signature per trace")
    S = np.array([osc.as_params(s) for s in signatures])
    sig_floor, sd_floor = floors(traces, cfg)
    total_ssr = sum(osc.ssr(s, tr) for s, tr in zip(S, traces))
    n_obs = sum(len(tr) for tr in traces)
    sigma = max(math.sqrt(total_ssr / n_obs), sig_floor)
    mu = S.mean(axis=0)
    msd = np.mean((S - mu) ** 2, axis=0)
    sd = np.sqrt(msd) if cfg.prior_exponent == "variance" else msd / 2.0
    return Hyperparams(sigma, mu, np.maximum(sd, sd_floor))


def initial_hyperparams(signatures: Sequence[ShapeSignature], traces: Sequence[TraceSeries],
                        cfg: FitConfig = FitConfig()) -> Hyperparams:
    """Starting hyperparameters: closed form from the initial guesses, with a deliberately broad prior."""
    h = update_hyperparams(signatures, traces, cfg)
    broad = cfg.initial_prior_scale * component_units(*data_units(traces))
    if cfg.prior_exponent == "std":
        broad = broad**2
    return Hyperparams(h.sigma, h.mu_S, np.maximum(h.sigma_S, broad))


def _hyper_change(old: Hyperparams, new: Hyperparams, units: np.ndarray) -> float:
    """Largest relative hyperparameter move; mean shifts are judged against a scale of at
    least one standardized unit so a collapsed component creeping by tiny amounts still stops."""
    mu_scale = np.maximum(np.maximum(np.abs(old.mu_S), old.sigma_S), units)
    return float(max(
        abs(new.sigma - old.sigma) / old.sigma,
        np.max(np.abs(new.mu_S - old.mu_S) / mu_scale),
        np.max(np.abs(new.sigma_S - old.sigma_S) / old.sigma_S),
    ))


# ---------------------------------------------------------------------------- lot fit


def _set_all(problems: Sequence[WaferProblem], hyper: Hyperparams, cfg: FitConfig):
    for prob in problems:
        prob.set_hyper(hyper, cfg.prior_exponent)


def fit_lot(traces: Sequence[TraceSeries], cfg: FitConfig = FitConfig(),
            warm_hyper: Hyperparams | None = None, require_same_lot: bool = True) -> LotFit:
    """Block coordinate descent over one lot of wafers from a single (tool, sensor, step)."""
    traces = list(traces)
    if not traces:
        raise DomainError("cannot fit an empty lot")
    if len({tr.triple for tr in traces}) > 1:
        raise DomainError("all traces of a lot must share (tool, sensor, step)")
    if require_same_lot and len({tr.lot_id for tr in traces}) > 1:
        raise DomainError("all traces of a lot must share the lot id")

    prior_mean = warm_hyper.mu_S if warm_hyper is not None else None
    sigs = [init_signature(tr, prior_mean) if (len(tr) >= 2 or prior_mean is not None) else None
            for tr in traces]
    if any(s is None for s in sigs):
        seed = np.mean([s.as_array() for s in sigs if s is not None], axis=0) if any(sigs) else None
        if seed is None:
            raise DomainError("no trace in the lot has two or more observations")
        sigs = [s if s is not None else init_signature(tr, seed) for s, tr in zip(sigs, traces)]

    if warm_hyper is not None:
        sig_floor, sd_floor = floors(traces, cfg)
        hyper = Hyperparams(max(warm_hyper.sigma, sig_floor), warm_hyper.mu_S,
                            np.maximum(warm_hyper.sigma_S, sd_floor))
    else:
        hyper = initial_hyperparams(sigs, traces, cfg)

    units = component_units(*data_units(traces))
    P = np.array([s.as_array() for s in sigs])
    problems = [WaferProblem(tr, hyper, cfg.prior_exponent) for tr in traces]
    cands = [omega_candidates(tr, cfg.multistart_count)[0] for tr in traces]
    f = _lot_objective(problems, P, hyper.mu_S, hyper)
    history = [f]
    converged = False
    rounds = 0
    for rounds in range(1, cfg.bcd_max_rounds + 1):
        # block 1: every wafer's signature, hyperparameters fixed
        for m, prob in enumerate(problems):
            if rounds == 1:
                P[m] = _refine_best(prob, P[m], cands[m], cfg)
            else:
                P[m] = _newton(prob, P[m], cfg)[0]
        f = _lot_objective(problems, P, hyper.mu_S, hyper)
        history.append(f)
        # block 2: shared offset of signatures and prior mean
        P, mu, f = _common_shift(problems, P, hyper, f, cfg)
        hyper = Hyperparams(hyper.sigma, mu, hyper.sigma_S)
        _set_all(problems, hyper, cfg)
        history.append(f)
        # block 3: closed-form hyperparameters, signatures fixed
        new_hyper = update_hyperparams(P, traces, cfg)
        _set_all(problems, new_hyper, cfg)
        f_new = _lot_objective(problems, P, new_hyper.mu_S, new_hyper)
        if f_new <= f:
            change = _hyper_change(hyper, new_hyper, units)
            hyper, f = new_hyper, f_new
        else:
            # the closed form is the exact minimiser, so an increase is rounding at the fixed point
            _set_all(problems, hyper, cfg)
            change = 0.0
        history.append(f)
        if change < cfg.bcd_tol:
            converged = True
            break

    signatures = [ShapeSignature.from_array(p) for p in P]
    ssrs = np.array([osc.ssr(p, tr) for p, tr in zip(P, traces)])
    return LotFit(signatures, hyper, history, ssrs, converged, rounds, [tr.wafer_id for tr in traces])
