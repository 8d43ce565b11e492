"""Shared test utilities: finite differences and random instances."""

import numpy as np

from greybox.oscillator import ShapeSignature, TraceSeries


def central_grad(f, p, h):
    p = np.asarray(p, dtype=float)
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h[i] if np.ndim(h) else h
        g[i] = (f(p + e) - f(p - e)) / (2 * e[i])
    return g


def central_jac(F, p, h):
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h[i] if np.ndim(h) else h
        cols.append((F(p + e) - F(p - e)) / (2 * e[i]))
    return np.column_stack(cols)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def random_signature(rng) -> ShapeSignature:
    return ShapeSignature(
        gamma=rng.uniform(0.1, 1.5), R=rng.uniform(-3, 3), omega=rng.uniform(0.0, 3.0),
        y=rng.uniform(-5, 5), phi=rng.uniform(-1.5, 1.5), c=rng.uniform(-1, 1), x=rng.uniform(-1, 1))


def random_trace(rng, s: ShapeSignature, n=30, noise=0.1) -> TraceSeries:
    from greybox.oscillator import eval_vec

    t = np.sort(rng.uniform(s.x, s.x + 6, n))
    t = np.unique(t)
    return TraceSeries(t, eval_vec(s, t) + noise * rng.standard_normal(t.size))


# pass/fail lines collected by the acceptance suite and printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    return ok
