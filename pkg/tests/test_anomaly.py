import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from greybox import anomaly as an
from greybox import oscillator as osc
from greybox.anomaly import NormalModel
from greybox.errors import DomainError
from greybox.fit import FitConfig, floors
from greybox.oscillator import ShapeSignature, TraceSeries
from greybox.simulate import synth_from_signature

from helpers import central_grad, central_jac, random_signature, rel_err

# [DERIVED] mpmath evaluation of the score definition (tests/oracles/generate_frozen.py)
TR_RAT = TraceSeries(np.arange(5) / 4, [1.2, 0.7, -0.3, 0.5, 0.9])
NM_RAT = NormalModel(0.3, [0.6, 1.2, 2.0, 0.5, 0.2, -0.2, 0.0], [0.05, 0.10, 0.20, 0.08, 0.03, 0.04, 0.50],
                     ("L0",), ("T", "s", "a"))
S_RAT = ShapeSignature(gamma=0.7, R=1.3, omega=2.1, y=0.4, phi=0.25, c=-0.3, x=0.1)
SCORE = 7.329284530865595178609213921863096110594
SCORE_GRAD = [35.67478465345306038119929, 37.10743828976799513668838, 4.675534856268336222190496,
              8.447873600344192705063761, 56.93326468156317196999639, -61.95151157343114229065592,
              22.84893566656369006903810]

# gradients displayed for the published spike and change point (used only for ranking)
PUBLISHED_SPIKE = [91.110112, 4.94883, 169.607, -6.655819, 10.89815, 279336942, 0.0537148]
PUBLISHED_CHANGE = [-1.067120e6, 4.223630e3, 4.947775e2, 7.326686e1, 3.092527e2, 1.623737e6, 9.901231e-3]

S0 = ShapeSignature(gamma=0.6, R=2.0, omega=1.2, y=10.0, phi=0.3, c=0.05, x=0.0)
T = np.linspace(0, 12, 120)


def _nm(mu=S0.as_array(), sd=(0.02, 0.05, 0.03, 0.1, 0.04, 0.003, 0.01), sigma=0.02, mode="variance"):
    return NormalModel(sigma, mu, sd, ("L0",), ("T", "s", "a"), mode)


def _random_case(seed):
    rng = np.random.default_rng(seed)
    s = random_signature(rng)
    t = np.sort(rng.uniform(s.x, s.x + 6, 25))
    tr = TraceSeries(t, osc.eval_vec(s, t) + 0.3 * rng.standard_normal(t.size))
    mu = s.as_array() + 0.2 * rng.standard_normal(7)
    mode = "std" if seed % 2 else "variance"
    nm = NormalModel(rng.uniform(0.1, 1), mu, rng.uniform(0.1, 2, 7), ("L",), ("T", "s", "a"), mode)
    return s, tr, nm


def test_score_matches_high_precision_oracle():
    assert an.score(S_RAT, TR_RAT, NM_RAT) == pytest.approx(SCORE, rel=1e-13)
    np.testing.assert_allclose(an.score_gradient(S_RAT, TR_RAT, NM_RAT), SCORE_GRAD, rtol=1e-12)


def test_score_baseline_and_unit_deviation():
    tr = synth_from_signature(S0, T)
    nm = _nm()
    base = 0.5 * math.log(nm.sigma_star**2) * T.size + float(np.sum(np.log(nm.sigma_star_S)))
    assert an.score(S0, tr, nm) == pytest.approx(base, rel=1e-14)
    assert nm.baseline(T.size) == pytest.approx(base, rel=1e-14)
    np.testing.assert_allclose(an.score_gradient(S0, tr, nm), 0, atol=1e-9)
    # move y by one prior std and shift the data with it: only the prior term changes
    s1 = S0.replace(y=S0.y + nm.sigma_star_S[3])
    tr1 = TraceSeries(T, tr.values + nm.sigma_star_S[3])
    assert an.score(s1, tr1, nm) == pytest.approx(base + 0.5, rel=1e-12)
    g = an.score_gradient(s1, tr1, nm)
    assert g[3] == pytest.approx(nm.sigma_star_S[3] / nm.sigma_star_S[3] ** 2, rel=1e-9)


@pytest.mark.parametrize("seed", [4, 5])
def test_score_matches_term_by_term_sum(seed):
    s, tr, nm = _random_case(seed)
    power = 2 if nm.prior_exponent == "variance" else 1
    total = 0.5 * math.log(nm.sigma_star**2) * len(tr)
    for t, z in zip(tr.times, tr.values):
        total += (z - osc.evaluate(s, t)) ** 2 / (2 * nm.sigma_star**2)
    p = s.as_array()
    for d in range(7):
        total += math.log(nm.sigma_star_S[d]) + 0.5 * (p[d] - nm.mu_star[d]) ** 2 / nm.sigma_star_S[d] ** power
    assert an.score(s, tr, nm) == pytest.approx(total, rel=1e-12)


@given(st.integers(0, 2**31))
def test_score_gradient_matches_finite_differences(seed):
    s, tr, nm = _random_case(seed)
    p = s.as_array()
    fd = central_grad(lambda q: an.score(q, tr, nm), p, 1e-6 * np.maximum(1, np.abs(p)))
    assert rel_err(an.score_gradient(p, tr, nm), fd) < 1e-5


@given(st.integers(0, 2**31))
def test_score_hessian_symmetric_and_matches_gradient_differences(seed):
    s, tr, nm = _random_case(seed)
    p = s.as_array()
    H = an.score_hessian(p, tr, nm)
    np.testing.assert_array_equal(H, H.T)
    fd = central_jac(lambda q: an.score_gradient(q, tr, nm), p, 1e-5 * np.maximum(1, np.abs(p)))
    assert rel_err(H, fd) < 1e-4


@given(st.integers(0, 2**31))
def test_score_is_bounded_below_by_baseline_on_perfect_fits(seed):
    rng = np.random.default_rng(seed)
    s = random_signature(rng)
    t = np.linspace(s.x, s.x + 5, 30)
    tr = TraceSeries(t, osc.eval_vec(s, t))
    nm = NormalModel(0.2, s.as_array() + rng.normal(0, 0.1, 7) * rng.integers(0, 2), rng.uniform(0.1, 1, 7),
                     ("L",), ("T", "s", "a"))
    base = nm.baseline(len(tr))
    val = an.score(s, tr, nm)
    assert val >= base - 1e-9 * abs(base)
    if np.array_equal(nm.mu_star, s.as_array()):
        assert val == pytest.approx(base, rel=1e-12)


def test_changepoint_zero_step_is_exact_gradient():
    s, tr, nm = _random_case(9)
    np.testing.assert_array_equal(an.changepoint_gradient(s, s, tr, nm), an.score_gradient(s, tr, nm))


def test_changepoint_gradient_is_taylor_formula():
    s, tr, nm = _random_case(10)
    p = s.as_array()
    q = p + 0.01 * np.arange(1, 8)
    expected = an.score_gradient(p, tr, nm) + an.score_hessian(p, tr, nm) @ ((q - p) / 2)
    np.testing.assert_allclose(an.changepoint_gradient(p, q, tr, nm), expected, rtol=1e-12)


def test_taylor_error_is_second_order():
    s, tr, nm = _random_case(12)
    p = s.as_array()
    delta = 0.05 * np.array([1, -1, 1, 1, -1, 1, 0.5])
    errs = []
    for k in range(2):
        d = delta / 2**k
        exact = an.score_gradient(p + d / 2, tr, nm)
        errs.append(np.linalg.norm(an.changepoint_gradient(p, p + d, tr, nm) - exact))
    assert 3.2 <= errs[0] / errs[1] <= 4.8


# ------------------------------------------------------------------ standardize and detectors

def test_standardize_examples():
    np.testing.assert_array_equal(an.standardize(np.full((5, 2), 3.0)), 0)
    with pytest.raises(DomainError):
        an.standardize([1.0])


def test_standardize_population_convention():
    z = an.standardize([1.0, 3.0])[:, 0]
    np.testing.assert_allclose(z, [-1.0, 1.0])  # population std of {1, 3} is 1


@given(st.integers(0, 2**31))
def test_standardized_columns_have_zero_mean_unit_std(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(5, 3, size=(int(rng.integers(3, 40)), 4))
    Z = an.standardize(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-10)
    np.testing.assert_allclose(an.standardize(Z), Z, atol=1e-10)


def test_trailing_window_standardization():
    x = np.arange(10.0)
    z = an.standardize(x, window=3)[:, 0]
    assert z[0] == 0
    np.testing.assert_allclose(z[2:], math.sqrt(1.5))
    assert z[1] == pytest.approx(1.0)


def test_spike_detector():
    assert an.detect_spikes(np.zeros(20)) == []
    rng = np.random.default_rng(0)
    x = rng.standard_normal(60)
    x[33] += 10
    assert an.detect_spikes(x) == [33]
    y = rng.standard_normal(60)
    y[20] += 12
    y[21] += 12
    assert an.detect_spikes(y) == []
    with pytest.raises(DomainError):
        an.detect_spikes([1, 2, 3])


def test_changepoint_detector_injection_and_constant():
    assert an.detect_changepoints(np.ones(40)) == []
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(80)
        x[40:] += 6
        found = an.detect_changepoints(x)
        hits += len(found) == 1 and abs(found[0] - 40) <= 2
    assert hits == 50


def test_changepoint_false_positive_rate():
    quiet = sum(not an.detect_changepoints(np.random.default_rng(1000 + k).standard_normal(100))
                for k in range(300))
    assert quiet / 300 >= 0.99


def test_shift_statistic_edge_cases():
    s = an.shift_statistics(np.r_[np.zeros(8), np.ones(8)], window=8)
    assert s[8] == math.inf and np.isnan(s[0])
    with pytest.raises(DomainError):
        an.detect_changepoints(np.zeros(10), window=8)


def test_rank_contributors_on_published_vectors():
    ranked = an.rank_contributors(PUBLISHED_SPIKE)
    assert ranked[0] == ("c", 279336942)
    names = [n for n, _ in an.rank_contributors(PUBLISHED_CHANGE)]
    assert names[:2] == ["c", "gamma"]
    signs = dict(an.rank_contributors(PUBLISHED_CHANGE))
    assert signs["gamma"] < 0 and signs["c"] > 0 and signs["R"] > 0 and signs["phi"] > 0


def test_rank_contributors_trivial_cases():
    assert [n for n, _ in an.rank_contributors(np.zeros(7))] == list(osc.PARAM_NAMES)
    assert an.rank_contributors(np.eye(7)[4])[0] == ("phi", 1.0)
    with pytest.raises(DomainError):
        an.rank_contributors([1, 2])


@given(st.lists(st.floats(-1e6, 1e6), min_size=7, max_size=7), st.floats(1e-3, 1e3))
def test_rank_contributors_scale_invariant(g, k):
    a = [n for n, _ in an.rank_contributors(g)]
    b = [n for n, _ in an.rank_contributors(np.array(g) * k)]
    mags = sorted(abs(v) for v in g)
    if all(mags[i] * (1 + 1e-9) < mags[i + 1] or mags[i] == mags[i + 1] for i in range(6)):
        assert a == b


# ------------------------------------------------------------------ normal model

def _wafers(n, lots=4, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    return [synth_from_signature(S0, T, noise, rng=rng, wafer_id=f"W{m}", lot_id=f"L{m * lots // n}",
                                 tool_id="T", sensor_id="s", step_id="a", sequence_index=m) for m in range(n)]


def test_normal_model_from_identical_wafers():
    traces = _wafers(12)
    nm, lf = an.fit_normal_model(traces)
    np.testing.assert_allclose(nm.mu_star, S0.as_array(), atol=1e-6)
    np.testing.assert_allclose(nm.sigma_star_S, floors(traces, FitConfig())[1])
    assert nm.source_lots == ("L0", "L1", "L2", "L3") and nm.triple == ("T", "s", "a")
    assert an.fit_normal_model(traces)[0] == nm


def test_normal_model_recovers_truth():
    traces = _wafers(20, noise=0.02, seed=3)
    nm, _ = an.fit_normal_model(traces)
    # all wafers share S0, so the spread of mu* is the estimation error: compare with sigma*_S / sqrt(n)
    err = np.abs(nm.mu_star - S0.as_array())[:6]
    assert np.all(err <= 2 * np.maximum(nm.sigma_star_S[:6] / math.sqrt(20), 0.02 * 0.1))


def test_normal_model_needs_eight_wafers():
    with pytest.raises(DomainError):
        an.fit_normal_model(_wafers(7))


def test_normal_model_validation():
    with pytest.raises(DomainError):
        _nm(sd=np.zeros(7))
    with pytest.raises(DomainError):
        NormalModel(1.0, np.zeros(7), np.ones(7), (), ("T", "s", "a"))
    with pytest.raises(DomainError):
        _nm(mode="cubic")
    assert np.allclose(_nm(mode="std").weights, 1 / _nm().sigma_star_S)


def test_score_wafer_record():
    tr = synth_from_signature(S0, T, 0.02, seed=1, wafer_id="W7", sequence_index=7)
    rec = an.score_wafer(S0, tr, _nm())
    assert (rec.wafer_id, rec.sequence_index) == ("W7", 7)
    assert rec.ssr == pytest.approx(osc.ssr(S0, tr))
    assert rec.gradient.shape == (7,) and not rec.gradient.flags.writeable
