import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpcontract.coupling import (
    CONSTANT_NAMES,
    CouplingParams,
    beta_eval,
    chi_eval,
    alpha_eval,
    compute_constants,
    f_eval,
    f_prime_eval,
    fit_decay,
    g_eval,
    h_eval,
    h_slope,
    simulate_coupling,
)
from lpcontract.models import colored_noise
from lpcontract.sde import simulate_ensemble

XI = 1e-3


def golden_params(P, **kw):
    return CouplingParams.simple(P["rho1"], P["L1"], P["L2"], P["L3"], P["theta"], P["Q"], P["rho2"],
                                 P["Sstar"], P["p"], P["n"], **kw)


@pytest.fixture(scope="module")
def unit_constants():
    return compute_constants(CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 2))


@pytest.fixture(scope="module")
def yz_model():
    return colored_noise("x^2/2", 1.0, 1.0).base


# -- constants ---------------------------------------------------------------------

def test_spot_values(unit_constants):
    assert unit_constants.M == 2.0
    with mpmath.workprec(113):
        assert mpmath.almosteq(unit_constants.extended["rho3"], mpmath.mpf(3) / 13, rel_eps=mpmath.mpf(2) ** -110)
    assert unit_constants.rho3 == 3 / 13


@pytest.mark.parametrize("variant", ["derived", "printed"])
def test_golden_vector(golden_constants, variant):
    c = compute_constants(golden_params(golden_constants["params"]), variant=variant)
    ref = golden_constants[variant]
    assert sorted(ref) == sorted(CONSTANT_NAMES)
    for name in CONSTANT_NAMES:
        assert getattr(c, name) == float(mpmath.mpf(ref[name])), name
        assert mpmath.almosteq(c.extended[name], mpmath.mpf(ref[name]), rel_eps=1e-15), name


def test_invariants_hold_on_golden(unit_constants):
    assert unit_constants.check_invariants() == []
    assert unit_constants.lambdap == unit_constants.cstar > 0
    assert unit_constants.Cp >= 1


def test_extended_range_survives_underflow(yz_model):
    c = compute_constants(CouplingParams.from_model(yz_model, 2.0))
    assert c.lambdap == 0.0  # below the double range
    assert c.extended["lambdap"] > 0
    assert c.extended["Cp"] > 1 and math.isinf(c.Cp)


def test_full_Q_norm_flag():
    Q = np.array([[3.0, 0.5], [0.5, 1.0]])
    prm = CouplingParams.simple(1, 1, 1, 1, 1, Q, 1, 1, 2)
    a = compute_constants(prm)
    b = compute_constants(prm, use_full_Q_norm=True)
    assert a.Q22 == 1.0 and b.Q22 == pytest.approx(np.linalg.eigvalsh(Q)[-1])
    assert a.S1s < b.S1s


def test_regularized_constants_converge_to_limit(unit_constants):
    prm = CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 2)
    errs = []
    for xi in (1e-2, 5e-3):
        c = compute_constants(prm, xi=xi)
        errs.append(abs(c.extended["lambdap"] / unit_constants.extended["lambdap"] - 1))
    assert errs[1] < errs[0] < 0.2


def test_constants_argument_checks():
    prm = CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 2)
    with pytest.raises(ValueError):
        compute_constants(prm, variant="other")
    with pytest.raises(ValueError):
        compute_constants(prm, variant="printed", xi=1e-3)
    with pytest.raises(ValueError):
        CouplingParams.simple(0, 1, 1, 1, 1, np.eye(2), 1, 1, 2)
    with pytest.raises(ValueError):
        CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 0.5)
    with pytest.raises(ValueError):
        CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 2, n=2)


_pos = st.floats(0.05, 5.0)


@settings(max_examples=1000, deadline=None)
@given(rho1=_pos, L1=_pos, L2=_pos, L3=_pos, theta=st.floats(0.2, 3.0), rho2=_pos, S=st.floats(0.1, 5.0),
       p=st.floats(1.0, 4.0), q=st.floats(0.2, 5.0), off=st.floats(-0.9, 0.9))
def test_invariants_over_random_parameters(rho1, L1, L2, L3, theta, rho2, S, p, q, off):
    Q = np.array([[1.0, off * math.sqrt(q)], [off * math.sqrt(q), q]])
    c = compute_constants(CouplingParams.simple(rho1, L1, L2, L3, theta, Q, rho2, S, p))
    assert c.check_invariants() == []
    assert c.M == pytest.approx(2 * L2 / rho1, rel=1e-15)


# -- profile functions -------------------------------------------------------------

def test_f_endpoints(unit_constants):
    c = unit_constants
    assert f_eval(0.0, c) == 0.0
    assert f_prime_eval(0.0, c) == 1.0
    h = 1e-6
    assert (f_eval(h, c) - f_eval(0.0, c)) / h == pytest.approx(1.0, abs=1e-6)


def test_f_prime_closed_form(unit_constants):
    c = unit_constants
    r = np.linspace(0, 0.9 * c.R1s, 50)
    np.testing.assert_allclose(f_prime_eval(r, c), np.exp(-c.L4 * r * r / (2 * c.theta**2)), rtol=1e-13)


@pytest.mark.parametrize("xi", [0.0, XI, 0.05])
def test_f_is_concave_nondecreasing_and_flat_beyond_cutoff(unit_constants, xi):
    c = unit_constants
    r = np.linspace(0, c.R1s + 3 * max(xi, 0.01), 4001)
    f = f_eval(r, c, xi)
    assert np.all(np.diff(f) >= -1e-15)
    assert np.all(np.diff(f, 2) <= 1e-12)
    flat = r >= c.R1s + xi
    assert np.ptp(f[flat]) <= 1e-15 * max(1.0, f[-1])


def test_f_derivative_matches_f_prime_inside(unit_constants):
    c = unit_constants
    r = np.linspace(0.1, 3.0, 30)
    h = 1e-6
    fd = (f_eval(r + h, c) - f_eval(r - h, c)) / (2 * h)
    np.testing.assert_allclose(fd, f_prime_eval(r, c), rtol=1e-6, atol=1e-12)


def test_g_endpoints(unit_constants):
    c = unit_constants
    assert g_eval(c.S_star, c) == 0.0
    assert g_eval(c.S2s, c) == pytest.approx(c.eps * (c.S2s - c.S_star) ** 2 / 2, rel=1e-14)
    assert np.all(g_eval(np.linspace(0, c.S_star, 20), c) == 0.0)


@pytest.mark.parametrize("xi", [0.0, XI, 0.1])
@pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
def test_g_is_convex_nondecreasing(xi, p):
    c = compute_constants(CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, p))
    s = np.linspace(0, c.S2s + 3, 20001)
    g = g_eval(s, c, xi)
    assert np.all(np.diff(g) >= -1e-12)
    assert np.all(np.diff(g, 2) >= -1e-9)


def test_g_far_field_curvature(unit_constants):
    c = compute_constants(CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 3.0))
    s0 = c.S2s + XI
    s = s0 + np.array([0.5, 1.0, 2.0])
    h = 1e-3
    g2 = (g_eval(s + h, c, XI) - 2 * g_eval(s, c, XI) + g_eval(s - h, c, XI)) / h**2
    np.testing.assert_allclose(g2, 3 * 2 * (s - s0), rtol=1e-5)


def test_h_profile_constraints():
    x = np.linspace(0, 3 * XI, 20001)
    H = h_eval(x, XI)
    slope = h_slope(x, XI)
    assert np.all(H <= x + 1e-18)
    assert np.all(H[x <= XI**2 / 4] == 0.0)
    np.testing.assert_array_equal(H[x >= XI / 2], x[x >= XI / 2])
    assert slope.min() >= 0 and slope.max() <= 1 + 4 * XI
    # slope is the derivative of H
    mid = 0.5 * (x[1:] + x[:-1])
    np.testing.assert_allclose(np.diff(H) / np.diff(x), h_slope(mid, XI), atol=1e-2)


def test_chi_switch():
    assert chi_eval(0.5 * XI, XI) == 0.0 and chi_eval(XI, XI) == 1.0
    r = np.linspace(0, 2 * XI, 1001)
    assert np.all(np.diff(chi_eval(r, XI)) >= 0)


def test_alpha_taper(unit_constants):
    c = unit_constants
    r = np.linspace(0, c.R1s + 2 * XI, 5001)
    a = alpha_eval(r, c.theta, c.R1s, XI)
    assert np.all(a[r <= c.R1s] == c.theta)
    assert np.all(a[r >= c.R1s + XI] == 0.0)
    assert np.all(np.diff(a) <= 1e-15) and a.min() >= 0


def test_beta_examples(unit_constants):
    c = unit_constants
    x = np.array([0.3, 0.7])
    assert beta_eval(x, x, c, 1, XI) == 0.0
    # |z - z'| = 2 xi and R = R1*/2
    dz = 2 * XI
    dy = (c.R1s / 2 - dz) / c.M
    assert beta_eval(x, x - np.array([dy, dz]), c, 1, XI) == pytest.approx(c.theta, abs=1e-15)
    far = x - np.array([(c.R1s + 2 * XI) / c.M, 0.0]) - np.array([0.0, 0.0])
    far[1] -= 2 * XI
    assert beta_eval(x, far, c, 1, XI) == 0.0
    pts = np.random.default_rng(0).normal(size=(200, 2))
    b = beta_eval(pts, -pts, c, 1, XI)
    assert np.all((b >= 0) & (b <= c.theta))


# -- simulation ------------------------------------------------------------------------

def test_equal_starts_give_zero_trace(yz_model):
    tr = simulate_coupling(yz_model, [0.5, -0.2], [0.5, -0.2], 0.5, 1e-2, 200, 3)
    assert np.all(tr.mean_f_R == 0) and np.all(tr.mean_g_S == 0) and np.all(tr.mean_omega == 0)
    assert tr.fallback_steps == 200 * 50


def test_orthogonality_and_trace_shape(yz_model):
    tr = simulate_coupling(yz_model, [1.0, 1.0], [-1.0, -1.0], 1.0, 1e-2, 300, 5, checkpoints=[0.0, 0.5, 1.0])
    assert tr.orthogonality_error <= 1e-12
    np.testing.assert_allclose(tr.times, [0.0, 0.5, 1.0])
    assert np.all(np.diff(tr.times) > 0)
    assert np.all(tr.mean_f_R >= 0) and np.all(tr.mean_g_S >= 0) and np.all(tr.mean_omega >= 0)
    D = np.array([2.0, 2.0])
    assert tr.mean_omega[0] == pytest.approx(max(np.linalg.norm(D), np.linalg.norm(D) ** 2))


def test_synchronous_limit_reproduces_marginals(yz_model):
    x0, x0p = np.array([1.0, 1.0]), np.array([-1.0, -1.0])
    _, paths = simulate_coupling(yz_model, x0, x0p, 0.2, 1e-2, 50, 11, force_synchronous=True,
                                 checkpoints=[0.2], return_paths=True)
    ens = simulate_ensemble(yz_model, np.stack([x0, x0p]), 0.2, 1e-2, 50, 11, store_x=True)
    X, Xp = paths[-1]
    assert np.array_equal(X, ens.x[-1, 0])
    assert np.array_equal(Xp, ens.x[-1, 1])


def test_colored_noise_start_points_use_model_coordinates():
    m = colored_noise("x^2/2", 1.0, 1.0)
    a = simulate_coupling(m, [1.0, 1.0], [-1.0, -1.0], 0.1, 1e-2, 100, 2)
    b = simulate_coupling(m.base, m.change.forward(np.array([1.0, 1.0])), m.change.forward(np.array([-1.0, -1.0])),
                          0.1, 1e-2, 100, 2)
    np.testing.assert_array_equal(a.mean_f_R, b.mean_f_R)


def test_coupling_is_thread_independent(yz_model):
    kw = dict(checkpoints=[0.05, 0.1])
    a = simulate_coupling(yz_model, [1.0, 1.0], [-1.0, -1.0], 0.1, 1e-2, 9000, 4, threads=1, **kw)
    b = simulate_coupling(yz_model, [1.0, 1.0], [-1.0, -1.0], 0.1, 1e-2, 9000, 4, threads=3, **kw)
    for f in ("mean_f_R", "mean_g_S", "mean_omega", "se_f_R", "se_cost"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_coupling_requires_structure():
    from lpcontract.models import ornstein_uhlenbeck

    with pytest.raises(ValueError):
        simulate_coupling(ornstein_uhlenbeck(1.0, 2), [0, 0], [1, 1], 0.1, 1e-2, 10, 1)


def test_fit_decay_recovers_exponential(yz_model):
    tr = simulate_coupling(yz_model, [1.0, 1.0], [-1.0, -1.0], 0.2, 1e-2, 100, 1)
    t = tr.times
    fake = tr.__class__(**{**tr.__dict__, "mean_f_R": 3.0 * np.exp(-0.7 * t), "mean_g_S": 0 * t,
                           "se_cost": 1e-6 * np.exp(-0.7 * t)})
    fit = fit_decay(fake)
    assert fit.rate == pytest.approx(0.7, rel=1e-9)
    assert not fit.extinct
    dead = tr.__class__(**{**tr.__dict__, "mean_f_R": 0 * t, "mean_g_S": 0 * t})
    assert fit_decay(dead).extinct
