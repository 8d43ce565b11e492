"""White-box closed-loop simulation and synthetic dataset generation.

The closed loop is integrated numerically with classical RK4 so that it stays
independent of the analytic oscillator it is used to validate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .control_map import ControlParams, ode_from_control_output
from .errors import DomainError, ValidationError
from .oscillator import PARAM_NAMES, PHI_BOUND, ShapeSignature, TraceSeries, eval_vec

CONTROL_FIELDS = ("k_p", "k_c", "tau_p", "tau_I", "q1", "q2")


def rng_for(seed: int, *keys: Any) -> np.random.Generator:
    """Independent, schedule-free RNG stream for ``(seed, *keys)``."""
    digest = hashlib.blake2b("\x1f".join(map(str, keys)).encode(), digest_size=16).digest()
    words = np.frombuffer(digest, dtype=np.uint32).tolist()
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])


@dataclass(frozen=True)
class SimConfig:
    cp: ControlParams
    v0: float = 0.0
    i0: float = 0.0
    dt: float = 0.01
    duration: float = 15.0
    sample_every: int = 10
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if not self.duration >= self.dt:
            raise DomainError("duration must be at least dt")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be nonnegative")
        if int(self.sample_every) != self.sample_every or self.sample_every < 1:
            raise DomainError("sample_every must be an integer >= 1")


def _rk4_path(cp: ControlParams, v0: float, i0: float, dt: float, n_steps: int):
    inv_tp = 1.0 / cp.tau_p
    gain = cp.k_p * inv_tp
    ki = cp.k_c / cp.tau_I

    def rhs(t, v, i):
        e = cp.q1 * t + cp.q2 - v
        u = cp.k_c * e + ki * i
        return -inv_tp * v + gain * u, e

    v = np.empty(n_steps + 1)
    integ = np.empty(n_steps + 1)
    v[0], integ[0] = v0, i0
    vk, ik = v0, i0
    for n in range(n_steps):
        t = n * dt
        a1, b1 = rhs(t, vk, ik)
        a2, b2 = rhs(t + 0.5 * dt, vk + 0.5 * dt * a1, ik + 0.5 * dt * b1)
        a3, b3 = rhs(t + 0.5 * dt, vk + 0.5 * dt * a2, ik + 0.5 * dt * b2)
        a4, b4 = rhs(t + dt, vk + dt * a3, ik + dt * b3)
        vk = vk + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        ik = ik + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        v[n + 1], integ[n + 1] = vk, ik
    return v, integ


def simulate_closed_loop(cfg: SimConfig, **ids: Any) -> tuple[TraceSeries, TraceSeries]:
    """Integrate the PI loop and return noisy ``(v, u)`` observation traces.

    The run ends at ``round(duration / dt) * dt``.  Unstable loops (``k_p k_c <= 0``)
    are simulated anyway and flagged with ``meta["unstable"]``.
    """
    cp = cfg.cp
    n_steps = max(1, int(round(cfg.duration / cfg.dt)))
    v, integ = _rk4_path(cp, cfg.v0, cfg.i0, cfg.dt, n_steps)
    idx = np.arange(0, n_steps + 1, int(cfg.sample_every))
    t = idx * cfg.dt
    v_s = v[idx]
    e = cp.q1 * t + cp.q2 - v_s
    u_s = cp.k_c * e + cp.k_c / cp.tau_I * integ[idx]
    rng = np.random.default_rng(cfg.seed)
    if cfg.noise_sigma > 0:
        v_s = v_s + rng.normal(0.0, cfg.noise_sigma, size=v_s.size)
        u_s = u_s + rng.normal(0.0, cfg.noise_sigma, size=u_s.size)
    meta = {"unstable": not cp.loop_gain > 0, "final_v": float(v[-1]), "final_i": float(integ[-1])}
    t = t + float(ids.pop("t_offset", 0.0))
    v_trace = TraceSeries(t, v_s, meta=dict(meta), **ids)
    u_trace = TraceSeries(t, u_s, meta=dict(meta, variable="input"), **ids)
    return v_trace, u_trace


def synth_from_signature(s: ShapeSignature, times, noise_sigma: float = 0.0, seed: int = 0,
                         rng: np.random.Generator | None = None, **ids: Any) -> TraceSeries:
    """Sample the oscillator at ``times`` and add seeded Gaussian noise."""
    if noise_sigma < 0:
        raise DomainError("noise_sigma must be nonnegative")
    t = np.asarray(times, dtype=float)
    z = eval_vec(s, t)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(seed)
        z = z + rng.normal(0.0, noise_sigma, size=z.size)
    return TraceSeries(t, z, **ids)


# --------------------------------------------------------------------------- plans


@dataclass(frozen=True)
class AnomalySpec:
    """Parameter shift injected at ``wafer_index``.

    ``kind="spike"`` touches that wafer only; ``kind="changepoint"`` persists from
    it onward.  With ``relative=True`` the delta is a fraction of the base value.
    """

    kind: str
    wafer_index: int
    param: str
    delta: float
    relative: bool = False


@dataclass(frozen=True)
class TriplePlan:
    tool: str
    sensor: str
    step: str
    lots: int = 4
    wafers_per_lot: int = 25
    n_points: int = 150
    t_start: float = 0.0
    t_stop: float = 15.0
    signature: Mapping[str, float] | None = None
    control: Mapping[str, float] | None = None
    jitter: Mapping[str, float] = field(default_factory=dict)
    noise_sigma: float = 0.0
    anomalies: tuple[AnomalySpec, ...] = ()

    @property
    def n_wafers(self) -> int:
        return self.lots * self.wafers_per_lot

    @property
    def param_names(self) -> tuple[str, ...]:
        return PARAM_NAMES if self.signature is not None else CONTROL_FIELDS


@dataclass(frozen=True)
class GenerationPlan:
    seed: int
    triples: tuple[TriplePlan, ...]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GenerationPlan":
        triples = []
        for t in d.get("triples", []):
            t = dict(t)
            t["anomalies"] = tuple(AnomalySpec(**a) for a in t.get("anomalies", ()))
            triples.append(TriplePlan(**t))
        return cls(seed=int(d.get("seed", 0)), triples=tuple(triples))

    def to_dict(self) -> dict:
        out = []
        for t in self.triples:
            td = {k: v for k, v in t.__dict__.items() if k != "anomalies"}
            td = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in td.items()}
            td["anomalies"] = [a.__dict__.copy() for a in t.anomalies]
            out.append(td)
        return {"seed": self.seed, "triples": out}


@dataclass(frozen=True)
class InjectedAnomaly:
    tool: str
    sensor: str
    step: str
    wafer_id: str
    kind: str
    param: str
    delta: float


@dataclass
class SyntheticDataset:
    traces: dict[tuple[str, str, str, str], TraceSeries]
    ground_truth: dict[tuple[str, str, str, str], ShapeSignature | ControlParams]
    injected_anomalies: list[InjectedAnomaly]
    plan: GenerationPlan | None = None


def wafer_id(tool: str, index: int) -> str:
    return f"{tool}-W{index:04d}"


def lot_id(tool: str, index: int) -> str:
    return f"{tool}-L{index:02d}"


def validate_plan(plan: GenerationPlan) -> None:
    problems: list[str] = []
    seen = set()
    layout: dict[str, tuple[int, int]] = {}
    for i, t in enumerate(plan.triples):
        tag = f"triple[{i}] ({t.tool},{t.sensor},{t.step})"
        key = (t.tool, t.sensor, t.step)
        if key in seen:
            problems.append(f"{tag}: duplicate triple")
        seen.add(key)
        if t.lots < 1 or t.wafers_per_lot < 1:
            problems.append(f"{tag}: lots and wafers_per_lot must be >= 1")
        if t.n_points < 1:
            problems.append(f"{tag}: n_points must be >= 1")
        if not t.t_stop > t.t_start:
            problems.append(f"{tag}: t_stop must exceed t_start")
        if t.noise_sigma < 0:
            problems.append(f"{tag}: noise_sigma must be >= 0")
        if (t.signature is None) == (t.control is None):
            problems.append(f"{tag}: give exactly one of 'signature' or 'control'")
            continue
        names = t.param_names
        base = t.signature if t.signature is not None else t.control
        if t.signature is not None:
            missing = [p for p in PARAM_NAMES[:-1] if p not in base]
        else:
            missing = [p for p in ("k_p", "k_c", "tau_p", "tau_I") if p not in base]
        if missing:
            problems.append(f"{tag}: base parameters missing {missing}")
        for p, sd in t.jitter.items():
            if p not in names:
                problems.append(f"{tag}: unknown jitter parameter {p!r}")
            elif sd < 0:
                problems.append(f"{tag}: jitter for {p!r} is negative")
        for a in t.anomalies:
            if a.kind not in ("spike", "changepoint"):
                problems.append(f"{tag}: unknown anomaly kind {a.kind!r}")
            if a.param not in names:
                problems.append(f"{tag}: unknown anomaly parameter {a.param!r}")
            if not 0 <= a.wafer_index < max(t.n_wafers, 0):
                problems.append(f"{tag}: anomaly wafer_index {a.wafer_index} outside 0..{t.n_wafers - 1}")
        prev = layout.setdefault(t.tool, (t.lots, t.wafers_per_lot))
        if prev != (t.lots, t.wafers_per_lot):
            problems.append(f"{tag}: lot layout {(t.lots, t.wafers_per_lot)} differs from {prev} for tool {t.tool}")
    if problems:
        raise ValidationError("inconsistent generation plan", problems)


def _wafer_params(t: TriplePlan, w: int, seed: int) -> dict[str, float]:
    names = t.param_names
    base = t.signature if t.signature is not None else t.control
    rng = rng_for(seed, "jitter", t.tool, t.sensor, t.step, wafer_id(t.tool, w))
    draws = rng.standard_normal(len(names))
    vals = {}
    for k, name in enumerate(names):
        v = float(base.get(name, 0.0))
        vals[name] = v + float(t.jitter.get(name, 0.0)) * draws[k]
    for a in t.anomalies:
        hit = w == a.wafer_index if a.kind == "spike" else w >= a.wafer_index
        if hit:
            d = a.delta * float(base.get(a.param, 0.0)) if a.relative else a.delta
            vals[a.param] += d
    return vals


def make_dataset(plan: GenerationPlan | Mapping[str, Any]) -> SyntheticDataset:
    """Build a reproducible dataset with recorded ground truth."""
    if not isinstance(plan, GenerationPlan):
        plan = GenerationPlan.from_dict(plan)
    validate_plan(plan)
    traces: dict = {}
    truth: dict = {}
    injected: list[InjectedAnomaly] = []
    for t in plan.triples:
        times = np.linspace(t.t_start, t.t_stop, t.n_points)
        for w in range(t.n_wafers):
            wid = wafer_id(t.tool, w)
            ids = dict(tool_id=t.tool, sensor_id=t.sensor, step_id=t.step, wafer_id=wid,
                       lot_id=lot_id(t.tool, w // t.wafers_per_lot), sequence_index=w)
            vals = _wafer_params(t, w, plan.seed)
            noise_rng = rng_for(plan.seed, "noise", t.tool, t.sensor, t.step, wid)
            if t.signature is not None:
                vals["omega"] = max(vals["omega"], 0.0)
                vals["phi"] = min(max(vals["phi"], -PHI_BOUND), PHI_BOUND)
                vals["x"] = float(times[0])
                sig = ShapeSignature(**vals)
                trace = synth_from_signature(sig, times, t.noise_sigma, rng=noise_rng, **ids)
                truth[(t.tool, t.sensor, t.step, wid)] = sig
            else:
                ctl = dict(t.control)
                cp = ControlParams(**vals)
                spacing = (t.t_stop - t.t_start) / max(t.n_points - 1, 1)
                sub = max(1, math.ceil(spacing / float(ctl.get("dt", 0.01)) - 1e-9))
                v_tr, u_tr = simulate_closed_loop(
                    SimConfig(cp, v0=float(ctl.get("v0", 0.0)), i0=float(ctl.get("i0", 0.0)),
                              dt=spacing / sub, duration=spacing * max(t.n_points - 1, 1),
                              sample_every=sub), t_offset=t.t_start, **ids)
                src = u_tr if ctl.get("variable", "output") == "input" else v_tr
                z = src.values[: t.n_points]
                if t.noise_sigma > 0:
                    z = z + noise_rng.normal(0.0, t.noise_sigma, size=z.size)
                trace = TraceSeries(src.times[: t.n_points], z, meta={"unstable": src.meta["unstable"]}, **ids)
                truth[(t.tool, t.sensor, t.step, wid)] = cp
            traces[(t.tool, t.sensor, t.step, wid)] = trace
        for a in t.anomalies:
            base = t.signature if t.signature is not None else t.control
            d = a.delta * float(base.get(a.param, 0.0)) if a.relative else a.delta
            injected.append(InjectedAnomaly(t.tool, t.sensor, t.step, wafer_id(t.tool, a.wafer_index),
                                            a.kind, a.param, d))
    return SyntheticDataset(traces, truth, injected, plan)


def truth_signature_from_control(cp: ControlParams) -> dict[str, float]:
    """Trend/frequency part of the signature implied by the control parameters."""
    ode = ode_from_control_output(cp)
    disc = 4 * ode.k - ode.gamma**2
    out = {"gamma": ode.gamma, "c": ode.a / ode.k, "y": (ode.b - ode.a / ode.k * ode.gamma) / ode.k}
    out["omega"] = math.sqrt(disc) / 2 if disc >= 0 else float("nan")
    return out


def demo_plan(seed: int = 2018) -> GenerationPlan:
    """Small two-tool plan with one spike and one change point."""
    base = {"gamma": 0.6, "R": 2.0, "omega": 1.2, "y": 10.0, "phi": 0.3, "c": 0.05}
    jit = {"gamma": 0.02, "R": 0.04, "omega": 0.02, "y": 0.03, "phi": 0.03, "c": 0.002}
    valve = {"gamma": 1.5, "R": -0.8, "omega": 0.0, "y": 3.0, "phi": 0.0, "c": 0.0}
    vjit = {"gamma": 0.02, "R": 0.03, "y": 0.02, "c": 0.0005}
    return GenerationPlan.from_dict({
        "seed": seed,
        "triples": [
            {"tool": "T1", "sensor": "temperature", "step": "s1", "lots": 6, "wafers_per_lot": 10,
             "n_points": 120, "t_start": 0.0, "t_stop": 12.0, "signature": base, "jitter": jit,
             "noise_sigma": 0.02,
             "anomalies": [{"kind": "spike", "wafer_index": 47, "param": "c", "delta": 0.02}]},
            {"tool": "T1", "sensor": "pressure", "step": "s2", "lots": 6, "wafers_per_lot": 10,
             "n_points": 100, "t_start": 5.0, "t_stop": 15.0, "signature": valve, "jitter": vjit,
             "noise_sigma": 0.01,
             "anomalies": [{"kind": "changepoint", "wafer_index": 50, "param": "gamma", "delta": -0.2,
                            "relative": True}]},
        ],
    })


def reference_plan(seed: int = 0, tools: int = 3, sensors: int = 4, steps: int = 2, lots: int = 8,
                   wafers_per_lot: int = 25, n_points: int = 150) -> GenerationPlan:
    """Desk-scale throughput workload; defaults give 24 triples x 8 lots x 25 wafers x 150 points."""
    rng = rng_for(seed, "reference")
    triples = []
    for a in range(tools):
        for b in range(sensors):
            for k in range(steps):
                base = {
                    "gamma": float(rng.uniform(0.3, 1.5)),
                    "R": float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 3.0)),
                    "omega": float(rng.uniform(0.5, 2.0)),
                    "y": float(rng.uniform(1.0, 20.0)),
                    "phi": float(rng.uniform(-0.5, 0.5)),
                    "c": float(rng.uniform(-0.1, 0.1)),
                }
                jitter = {n: 0.02 * max(abs(v), 0.05) for n, v in base.items()}
                triples.append(TriplePlan(
                    tool=f"T{a + 1}", sensor=f"sensor{b + 1}", step=f"s{k + 1}", lots=lots,
                    wafers_per_lot=wafers_per_lot, n_points=n_points, t_start=0.0, t_stop=15.0,
                    signature=base, jitter=jitter, noise_sigma=0.01 * abs(base["R"])))
    return GenerationPlan(seed, tuple(triples))
