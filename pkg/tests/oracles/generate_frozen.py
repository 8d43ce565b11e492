"""Recompute the frozen oracle values used by the test-suite.

Independent of the package: symbolic differentiation (sympy) evaluated at
40 significant digits (mpmath), and exact rational arithmetic for the
control algebra.  Run ``python tests/oracles/generate_frozen.py`` and paste
the output into the tests if the oracle instances ever change.
"""

import sympy as sp

g, R, w, y, phi, c, x, t = sp.symbols("gamma R omega y phi c x t", real=True)
PARAMS = [g, R, w, y, phi, c, x]
alpha = R * sp.exp(-g * (t - x) / 2) * sp.cos(w * (t - x) - phi) + c * (t - x) + y

S0 = dict(zip(PARAMS, [sp.Rational(7, 10), sp.Rational(13, 10), sp.Rational(21, 10), sp.Rational(2, 5),
                       sp.Rational(1, 4), sp.Rational(-3, 10), sp.Rational(1, 2)]))
T0 = sp.Rational(19, 10)


def show(name, expr):
    print(f"{name} = {sp.N(expr, 40)}")


def oscillator_values():
    sub = {**S0, t: T0}
    show("ALPHA", alpha.subs(sub))
    print("GRAD = [")
    for p in PARAMS:
        print(f"    {sp.N(sp.diff(alpha, p).subs(sub), 25)},")
    print("]")
    print("HESS = [")
    for p in PARAMS:
        row = ", ".join(str(sp.N(sp.diff(alpha, p, q).subs(sub), 25)) for q in PARAMS)
        print(f"    [{row}],")
    print("]")


def score_values():
    times = [sp.Rational(k, 4) for k in range(5)]
    z = [sp.Rational(v, 10) for v in (12, 7, -3, 5, 9)]
    sigma = sp.Rational(3, 10)
    mu = [sp.Rational(v, 10) for v in (6, 12, 20, 5, 2, -2, 0)]
    sd = [sp.Rational(v, 100) for v in (5, 10, 20, 8, 3, 4, 50)]
    s_at = dict(zip(PARAMS, [sp.Rational(7, 10), sp.Rational(13, 10), sp.Rational(21, 10), sp.Rational(2, 5),
                             sp.Rational(1, 4), sp.Rational(-3, 10), sp.Rational(1, 10)]))
    n = len(times)
    data = sum((zi - alpha.subs(t, ti)) ** 2 for ti, zi in zip(times, z))
    prior = sum((p - m) ** 2 / (2 * s**2) for p, m, s in zip(PARAMS, mu, sd))
    anom = n * sp.log(sigma**2) / 2 + data / (2 * sigma**2) + sum(sp.log(s) for s in sd) + prior
    show("SCORE", anom.subs(s_at))
    print("SCORE_GRAD = [")
    for p in PARAMS:
        print(f"    {sp.N(sp.diff(anom, p).subs(s_at), 25)},")
    print("]")


def control_values():
    kp, kc, tp, ti, q1, q2 = (sp.Rational(2), sp.Rational(1, 2), sp.Rational(3), sp.Rational(4, 5),
                              sp.Rational(1, 5), sp.Rational(3, 2))
    kbar = kp * kc
    gamma = (1 + kbar) / tp
    k = kbar / (ti * tp)
    print("OUTPUT_ODE =", [gamma, k, kbar * q1 / (ti * tp), kbar * q1 / tp + kbar * q2 / (ti * tp)])
    print("INPUT_ODE =", [gamma, k, kc * q1 / (ti * tp), kc * (q1 * (tp + ti) + q2) / (ti * tp)])
    print("OMEGA =", sp.N(sp.sqrt(4 * k - gamma**2) / 2, 30))


if __name__ == "__main__":
    oscillator_values()
    score_values()
    control_values()
