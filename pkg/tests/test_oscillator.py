import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from greybox import oscillator as osc
from greybox._kernels import wafer_fgh, wafer_value
from greybox.errors import DomainError
from greybox.oscillator import ShapeSignature, TraceSeries

from helpers import central_grad, central_jac, random_signature, rel_err

# [DERIVED] sympy derivatives evaluated with mpmath (tests/oracles/generate_frozen.py)
S0 = ShapeSignature(gamma=0.7, R=1.3, omega=2.1, y=0.4, phi=0.25, c=-0.3, x=0.5)
T0 = 1.9
ALPHA = -0.7365763350744000671932539341913985347534
GRAD = [0.5016034345520800470352777, -0.5512125654418462055332723, -0.4865762649550473370600329,
        1.0, 0.3475544749678909550428807, 1.4, 0.7790626801565309820724105]
HESS = [
    [-0.3511224041864560329246944, 0.3858487958092923438732906, 0.3406033854685331359420230, 0,
     -0.2432881324775236685300165, 0, -0.6936320436467717210473143],
    [0.3858487958092923438732906, 0, -0.3742894345808056438923330, 0, 0.2673495961291468884945236, 0,
     0.3685097539665622939018542],
    [0.3406033854685331359420230, -0.3742894345808056438923330, 1.404489616745824131698778, 0,
     -1.003206869104160094070555, 0, -1.929481642885111810476297],
    [0, 0, 0, 0, 0, 0, 0],
    [-0.2432881324775236685300165, 0.2673495961291468884945236, -1.003206869104160094070555, 0,
     0.7165763350744000671932539, 0, 1.626454369895001975370841],
    [0, 0, 0, 0, 0, 0, -1.0],
    [-0.6936320436467717210473143, 0.3685097539665622939018542, -1.929481642885111810476297, 0,
     1.626454369895001975370841, -1.0, 3.583226114834289992004111],
]


def test_evaluate_matches_symbolic_oracle():
    assert osc.evaluate(S0, T0) == pytest.approx(ALPHA, rel=1e-14)


def test_gradient_matches_symbolic_oracle():
    np.testing.assert_allclose(osc.grad_params(S0, T0), GRAD, rtol=1e-13, atol=1e-15)


def test_hessian_matches_symbolic_oracle():
    np.testing.assert_allclose(osc.hess_params(S0, T0), HESS, rtol=1e-13, atol=1e-15)


def test_eval_at_x_is_R_cos_phi_plus_y():
    # tau = 0: the linear term vanishes and the envelope is one  [TRIVIAL]
    assert osc.evaluate(S0, S0.x) == pytest.approx(S0.R * math.cos(S0.phi) + S0.y, rel=1e-15)


def test_eval_vec_preserves_order_and_matches_scalar():
    t = np.array([3.0, -1.0, 0.5, 2.25])
    v = osc.eval_vec(S0, t)
    assert v.shape == t.shape
    np.testing.assert_allclose(v, [osc.evaluate(S0, ti) for ti in t], rtol=1e-14)


def test_zero_amplitude_is_a_line():
    s = S0.replace(R=0.0)
    t = np.linspace(-2, 5, 9)
    np.testing.assert_allclose(osc.eval_vec(s, t), s.c * (t - s.x) + s.y, rtol=1e-14)


def test_domain_errors():
    with pytest.raises(DomainError):
        osc.evaluate(S0, math.nan)
    with pytest.raises(DomainError):
        osc.eval_vec([0, 1, 1, 0, 0, math.inf, 0], [0.0])
    with pytest.raises(DomainError):
        ShapeSignature(0.1, 1, -0.5, 0, 0, 0, 0)
    with pytest.raises(DomainError):
        ShapeSignature(0.1, 1, 0.5, 0, 1.6, 0, 0)
    with pytest.raises(DomainError):
        osc.eval_vec(S0, [])


def test_trace_validation():
    with pytest.raises(DomainError):
        TraceSeries([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(DomainError):
        TraceSeries([0.0, 1.0], [1.0])
    with pytest.raises(DomainError):
        TraceSeries([0.0, 1.0], [1.0, math.nan])
    tr = TraceSeries([0.0, 1.0], [1.0, 2.0], tool_id="T", sensor_id="s", step_id="a")
    assert tr.triple == ("T", "s", "a") and len(tr) == 2
    with pytest.raises(ValueError):
        tr.values[0] = 5.0


def test_signature_round_trip():
    assert ShapeSignature.from_array(S0.as_array()) == S0
    assert S0.replace(c=2.0).c == 2.0
    assert list(S0.as_dict()) == list(osc.PARAM_NAMES)


@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    s = random_signature(rng)
    t = float(rng.uniform(s.x, s.x + 5))
    p = s.as_array()
    fd = central_grad(lambda q: osc.evaluate(q, t), p, 1e-6)
    assert rel_err(osc.grad_params(p, t), fd) < 1e-6


@given(seed=st.integers(0, 2**32 - 1))
def test_hessian_matches_differences_of_gradient(seed):
    rng = np.random.default_rng(seed)
    s = random_signature(rng)
    t = float(rng.uniform(s.x, s.x + 5))
    p = s.as_array()
    H = osc.hess_params(p, t)
    fd = central_jac(lambda q: osc.grad_params(q, t), p, 1e-5)
    np.testing.assert_allclose(H, H.T, atol=0)
    assert rel_err(H, fd) < 1e-6


@given(seed=st.integers(0, 2**32 - 1))
def test_phase_flip_identity(seed):
    # (R, phi) and (-R, phi - pi) trace the same curve
    rng = np.random.default_rng(seed)
    p = random_signature(rng).as_array()
    q = p.copy()
    q[1], q[4] = -p[1], p[4] - math.pi
    t = np.linspace(p[6], p[6] + 5, 17)
    np.testing.assert_allclose(osc.eval_vec(p, t), osc.eval_vec(q, t), atol=1e-12 * (1 + abs(p[1]) + abs(p[3])))


@given(seed=st.integers(0, 2**32 - 1))
def test_compiled_kernel_agrees_with_vectorised_derivatives(seed):
    rng = np.random.default_rng(seed)
    p = random_signature(rng).as_array()
    t = np.sort(rng.uniform(p[6], p[6] + 6, 25))
    z = osc.eval_vec(p, t) + rng.standard_normal(t.size)
    inv_var = 1 / 0.3**2
    mu = rng.standard_normal(7)
    w = rng.uniform(0.1, 10, 7)
    r, J, rH = osc.residual_derivatives(p, t, z)
    d = p - mu
    f_ref = 0.5 * inv_var * (r @ r) + 0.5 * float(w[:6] @ (d[:6] ** 2))
    g_ref = (-inv_var * (J.T @ r) + w * d)[:6]
    H_ref = (inv_var * (J.T @ J - rH))[:6, :6] + np.diag(w[:6])
    f, g, H = wafer_fgh(p, t, z, inv_var, mu, w)
    assert f == pytest.approx(f_ref, rel=1e-12)
    assert wafer_value(p, t, z, inv_var, mu, w) == pytest.approx(f_ref, rel=1e-12)
    np.testing.assert_allclose(g, g_ref, rtol=1e-9, atol=1e-9 * np.max(np.abs(g_ref)))
    np.testing.assert_allclose(H, H_ref, rtol=1e-9, atol=1e-9 * np.max(np.abs(H_ref)))


def test_ssr_zero_on_own_curve():
    t = np.linspace(0.5, 6, 40)
    tr = TraceSeries(t, osc.eval_vec(S0, t))
    assert osc.ssr(S0, tr) < 1e-25
