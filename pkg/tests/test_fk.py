import numpy as np
import pytest
import scipy.linalg

from lpcontract.expr import parse_expression
from lpcontract.fk import (
    NonConvergenceError,
    build_operator,
    leading_eigenvalue,
    sturm_count_below,
    sweep,
)
from lpcontract.models import linear_model, ornstein_uhlenbeck, overdamped1d

from conftest import U0, U1, U2, U2_PARAMS, overdamped


def _dense_reflecting(U, theta2, p, lo, hi, dx):
    """Independent dense assembly of b f' + theta^2 f'' + p eta f with mirrored ghosts."""
    e = parse_expression(U)
    x = np.linspace(lo, hi, int(round((hi - lo) / dx)) + 1)
    b = -e.derivative(1)(x)
    eta = -e.derivative(2)(x)
    n = x.size
    A = np.zeros((n, n))
    for i in range(n):
        left = theta2 / dx**2 - b[i] / (2 * dx)
        right = theta2 / dx**2 + b[i] / (2 * dx)
        A[i, i] = -2 * theta2 / dx**2 + p * eta[i]
        A[i, i - 1 if i > 0 else 1] += left
        A[i, i + 1 if i < n - 1 else n - 2] += right
    return A


def _dense_top(U, theta2, p, dx, lo=-5.0, hi=5.0):
    return float(np.max(scipy.linalg.eigvals(_dense_reflecting(U, theta2, p, lo, hi, dx)).real))


def test_stencil_example():
    op = build_operator(ornstein_uhlenbeck(0.0, 1, 1.0), 1.0, (-3.0, 3.0), 0.5)
    np.testing.assert_allclose(op.diag, -8.0, rtol=1e-14)
    np.testing.assert_allclose(op.sup, 4.0, rtol=1e-14)
    np.testing.assert_allclose(op.sub, 4.0, rtol=1e-14)


def test_quadratic_potential_nodes():
    op = build_operator(overdamped1d(U0, 1.0), 3.0, (-5, 5), 1e-2)
    np.testing.assert_allclose(op.b, -2 * op.x, atol=1e-15)
    np.testing.assert_array_equal(op.peta, -6.0)


def test_u1_curvature_at_origin():
    op = build_operator(overdamped(U1, 1.0), 2.0, (-5, 5), 1e-3)
    i0 = int(np.argmin(np.abs(op.x)))
    assert op.x[i0] == pytest.approx(0.0, abs=1e-12)
    assert op.peta[i0] / 2.0 == pytest.approx(2.0, abs=1e-12)


def test_reflecting_rows_sum_to_p_eta():
    op = build_operator(overdamped(U1, 0.7), 1.5, (-5, 5), 1e-2)
    A = op.dense()
    np.testing.assert_allclose(A.sum(axis=1), op.peta, atol=1e-8)


def test_dirichlet_drops_end_nodes():
    op = build_operator(overdamped(U0, 1.0), 1.0, (-5, 5), 0.1, boundary="dirichlet")
    assert op.dense().shape == (op.n - 2, op.n - 2)


def test_too_few_nodes():
    with pytest.raises(ValueError):
        build_operator(overdamped(U0, 1.0), 1.0, (0.0, 1.0), 0.2)


def test_operator_is_one_dimensional():
    with pytest.raises(ValueError):
        build_operator(ornstein_uhlenbeck(1.0, 2), 1.0)


@pytest.mark.parametrize("theta2", [0.1, 1.0, 5.0])
def test_quadratic_potential_eigenvalue(theta2):
    op = build_operator(overdamped(U0, theta2), 2.0, (-5, 5), 1e-3)
    assert leading_eigenvalue(op).value / 2.0 == pytest.approx(-2.0, abs=1e-5)


def test_spectral_shift():
    m = overdamped(U1, 1.0)
    p, c = 2.0, 0.37
    base = leading_eigenvalue(build_operator(m, p, dx=1e-2)).value
    shifted = leading_eigenvalue(build_operator(m, p, dx=1e-2, eta=lambda x: m.eta(x) + c)).value
    assert shifted - base == pytest.approx(p * c, abs=1e-8)


def test_u1_against_richardson_extrapolated_dense_oracle():
    coarse = _dense_top(U1, 1.0, 2.0, 2e-2)
    fine = _dense_top(U1, 1.0, 2.0, 1e-2)
    oracle = (4 * fine - coarse) / 3
    value = leading_eigenvalue(build_operator(overdamped(U1, 1.0), 2.0, (-5, 5), 1e-3)).value
    assert value == pytest.approx(oracle, abs=1e-4)


def test_dense_oracle_matches_assembly():
    A = _dense_reflecting(U1, 1.0, 2.0, -5, 5, 0.05)
    np.testing.assert_allclose(build_operator(overdamped(U1, 1.0), 2.0, (-5, 5), 0.05).dense(), A, rtol=1e-13)


def test_second_order_refinement():
    m = overdamped(U1, 1.0)
    lam = [leading_eigenvalue(build_operator(m, 2.0, dx=h)).value for h in (0.04, 0.02, 0.01)]
    ratio = (lam[0] - lam[1]) / (lam[1] - lam[2])
    assert 3.6 < ratio < 4.4


@pytest.mark.parametrize("U,params,theta2,p", [(U1, None, 1.0, 2.0), (U2, U2_PARAMS, 0.5, 1.0), (U0, None, 0.3, 3.0)])
def test_sturm_and_power_agree(U, params, theta2, p):
    op = build_operator(overdamped(U, theta2, params), p, (-5, 5), 0.02)
    a = leading_eigenvalue(op, method="sturm")
    b = leading_eigenvalue(op, method="power")
    assert a.value == pytest.approx(b.value, abs=1e-8)
    np.testing.assert_allclose(a.vector, b.vector, atol=1e-5)


def test_power_iteration_reports_non_convergence():
    op = build_operator(overdamped(U1, 1.0), 2.0, (-5, 5), 1e-3)
    with pytest.raises(NonConvergenceError) as info:
        leading_eigenvalue(op, method="power", max_iter=1000)
    assert np.isfinite(info.value.residual)


def test_non_gradient_model_uses_power_iteration():
    m = linear_model([[-1.0]], sigma=[[1.0]])
    object.__setattr__(m, "potential", None)
    r = leading_eigenvalue(build_operator(m, 1.0, (-5, 5), 0.05))
    assert r.method in ("sturm", "power")
    assert r.value == pytest.approx(-1.0, abs=1e-8)


def test_eigenvector_is_positive_and_normalized():
    r = leading_eigenvalue(build_operator(overdamped(U1, 1.0), 1.0, dx=1e-2))
    assert np.all(r.vector >= 0) and np.linalg.norm(r.vector) == pytest.approx(1.0)
    assert r.residual < 1e-6


def test_monotone_in_eta():
    m = overdamped(U1, 1.0)
    lo = leading_eigenvalue(build_operator(m, 1.0, dx=1e-2)).value
    hi = leading_eigenvalue(build_operator(m, 1.0, dx=1e-2, eta=lambda x: m.eta(x) + 0.1 * np.exp(-x[..., 0] ** 2))).value
    assert lo <= hi


def test_symmetrizer_is_the_gibbs_weight():
    theta2 = 0.8
    op = build_operator(overdamped(U1, theta2), 1.0, (-5, 5), 1e-3)
    logD = op.log_symmetrizer()
    U = parse_expression(U1)(op.x)
    target = U / (2 * theta2)
    # the mirrored boundary rows change only the two end ratios
    inner = slice(1, -1)
    err = (logD[inner] - logD[1]) - (target[inner] - target[1])
    assert np.abs(err).max() < 1e-4
    lower, d, upper = op.bands()
    D = np.exp(logD)
    np.testing.assert_allclose(upper * D[1:] / D[:-1], lower * D[:-1] / D[1:], rtol=1e-10)


def test_sturm_count():
    d = np.array([2.0, 2.0, 2.0])
    e2 = np.array([1.0, 1.0])
    # eigenvalues 2 - sqrt 2, 2, 2 + sqrt 2
    assert sturm_count_below(d, e2, 1.0) == 1
    assert sturm_count_below(d, e2, 2.5) == 2
    assert sturm_count_below(d, e2, 4.0) == 3


@pytest.mark.parametrize("theta2", [0.1, 0.5, 1.0, pytest.param(5.0, marks=pytest.mark.xfail(
    strict=True, reason="at theta^2 = 5 the ground state still carries weight at |x| = 5"))])
def test_domain_enlargement(theta2):
    m = overdamped(U1, theta2)
    a = leading_eigenvalue(build_operator(m, 1.0, (-5, 5), 1e-2)).value
    b = leading_eigenvalue(build_operator(m, 1.0, (-7, 7), 1e-2)).value
    assert abs(a - b) < 1e-8


def test_sweep_quadratic_family_is_flat():
    s = sweep(U0, [1.0, 2.0], [0.5, 1.0, 2.0], dx=1e-2)
    np.testing.assert_allclose(s.values, -2.0, atol=1e-8)
    assert s.converged.all()
    assert len(list(s.rows())) == 6


def test_sweep_cells_match_single_solves():
    s = sweep(U2, [1.0, 3.0], [0.1, 5.0], dx=1e-2, params=U2_PARAMS)
    for i, p in enumerate(s.p):
        for j, t2 in enumerate(s.theta2):
            op = build_operator(overdamped(U2, t2, U2_PARAMS), p, dx=1e-2)
            assert s.values[i, j] == pytest.approx(leading_eigenvalue(op).value / p, abs=1e-8)


def test_sweep_signs():
    s1 = sweep(U1, [1.0], [5.0], dx=1e-2)
    s2 = sweep(U2, [3.0], [0.1], dx=1e-2, params=U2_PARAMS)
    assert s1.values[0, 0] < 0 and s2.values[0, 0] > 0


def test_sweep_is_thread_independent():
    a = sweep(U1, [1.0, 2.0], [0.5, 2.0], dx=2e-2, threads=1)
    b = sweep(U1, [1.0, 2.0], [0.5, 2.0], dx=2e-2, threads=4)
    assert np.array_equal(a.values, b.values)


def test_sweep_rejects_empty_grid():
    with pytest.raises(ValueError):
        sweep(U1, [], [1.0])
