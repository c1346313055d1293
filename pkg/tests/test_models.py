import numpy as np
import pytest

from lpcontract.models import (
    MetricChange,
    StateDecomposition,
    builtin_model,
    colored_noise,
    kinetic_langevin,
    linear_model,
    ornstein_uhlenbeck,
    overdamped1d,
    sym_max_eig,
)

from conftest import U0, U1, U2, U2_PARAMS


def _models():
    return {
        "ou1": ornstein_uhlenbeck(1.0, 1, 1.0),
        "ou3": ornstein_uhlenbeck(0.7, 3, 0.5),
        "u0": overdamped1d(U0, 1.0),
        "u1": overdamped1d(U1, 1.0),
        "u2": overdamped1d(U2, 0.5, U2_PARAMS),
        "kinetic": kinetic_langevin("x^2/2 + 0.3*cos(2*x)", 2.5, 1.0, 2),
        "colored": colored_noise("x^2/2", 1.0, 1.0),
        "colored_yz": colored_noise("x^2/2 + 0.5*cos(x)", 1.0, 1.0).base,
        "linear": linear_model([[-1.0, 2.0], [0.0, -3.0]]),
    }


MODELS = _models()


def test_ou_example():
    m = builtin_model("ornstein_uhlenbeck", rate=1.0, d=1, theta=1.0)
    x = np.array([[0.3], [-2.0]])
    np.testing.assert_array_equal(m.drift(x), -x)
    np.testing.assert_array_equal(m.eta(x), [-1.0, -1.0])
    assert m.lambda_star == 1.0


def test_quadratic_overdamped_example():
    m = overdamped1d(U0, 1.0)
    x = np.linspace(-4, 4, 9)[:, None]
    np.testing.assert_allclose(m.drift(x), -2 * x, rtol=0, atol=0)
    np.testing.assert_allclose(m.eta(x), -2.0, rtol=0, atol=0)


def test_overdamped_noise_is_sqrt2_theta():
    m = overdamped1d(U1, 0.8)
    assert m.sigma.shape == (1, 1)
    assert m.sigma[0, 0] == pytest.approx(np.sqrt(2) * 0.8, rel=1e-15)


def test_kinetic_jacobian_example():
    m = kinetic_langevin("x^2/2", 2.0, 1.0, 1)
    pts = np.random.default_rng(1).normal(size=(7, 2)) * 3
    np.testing.assert_array_equal(m.jacobian(pts), np.broadcast_to([[0.0, 1.0], [-1.0, -2.0]], (7, 2, 2)))


def test_kinetic_drift_structure():
    m = kinetic_langevin("x^2/2", 2.0, 1.0, 1)
    np.testing.assert_allclose(m.drift(np.array([1.5, -0.5])), [-0.5, -1.5 + 1.0])


@pytest.mark.parametrize("bad", [dict(theta=0.0), dict(theta=-1.0)])
def test_overdamped_rejects_nonpositive_theta(bad):
    with pytest.raises(ValueError):
        overdamped1d(U0, **bad)


def test_kinetic_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        kinetic_langevin("x^2/2", 0.0)


def test_linear_rejects_non_square():
    with pytest.raises(ValueError):
        linear_model(np.ones((2, 3)))


def test_unknown_builtin_kind():
    with pytest.raises(ValueError):
        builtin_model("nonsense")


@pytest.mark.parametrize("name", sorted(MODELS))
def test_eta_bounds_symmetric_jacobian(name, rng):
    m = MODELS[name]
    x = rng.uniform(-4, 4, size=(100, m.dim))
    top = sym_max_eig(m.jacobian(x))
    assert np.all(top <= m.eta(x) + 1e-9)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_jacobian_matches_finite_differences(name, rng):
    m = MODELS[name]
    h = 1e-6
    for x in rng.uniform(-3, 3, size=(20, m.dim)):
        J = m.jacobian(x)
        fd = np.empty_like(J)
        for j in range(m.dim):
            e = np.zeros(m.dim)
            e[j] = h
            fd[:, j] = (m.drift(x + e) - m.drift(x - e)) / (2 * h)
        scale = max(1.0, np.abs(J).max())
        assert np.abs(J - fd).max() <= 1e-5 * scale


def test_eta_in_one_dimension_is_the_drift_derivative(rng):
    m = overdamped1d(U2, 0.5, U2_PARAMS)
    x = rng.uniform(-3, 3, size=(50, 1))
    np.testing.assert_array_equal(m.eta(x), m.jacobian(x)[:, 0, 0])


def test_sigma_is_read_only():
    m = ornstein_uhlenbeck(1.0)
    with pytest.raises(ValueError):
        m.sigma[0, 0] = 2.0


def test_metric_square_roots(rng):
    B = rng.normal(size=(4, 4))
    Q = B @ B.T + 0.5 * np.eye(4)
    mc = MetricChange(Q, rho2=0.3, S_star=1.0)
    np.testing.assert_allclose(mc.sqrt @ mc.sqrt, Q, rtol=1e-12, atol=1e-12 * np.abs(Q).max())
    np.testing.assert_allclose(mc.sqrt @ mc.inv_sqrt, np.eye(4), atol=1e-12)


@pytest.mark.parametrize("Q", [np.diag([1.0, 1e-13]), np.array([[1.0, 2.0], [2.0, 1.0]]), [[1.0, 0.5], [0.0, 1.0]]])
def test_metric_rejects_bad_Q(Q):
    with pytest.raises(ValueError):
        MetricChange(np.asarray(Q), rho2=1.0, S_star=1.0)


def test_decomposition_sigma_check():
    dec = StateDecomposition(1, 1, 1.0, 1.0, 1.0, 1.0, theta=1.0)
    assert dec.check_sigma([[0.0], [1.0]])
    assert not dec.check_sigma([[0.0], [0.9]])
    with pytest.raises(ValueError):
        StateDecomposition(1, 1, 0.0, 1.0, 1.0, 1.0, theta=1.0)


def test_colored_noise_change_of_variables():
    m = colored_noise("x^2/2", 1.0, 1.0)
    ch = m.change
    x = np.array([[1.0, 1.0], [0.5, -2.0]])
    u = ch.forward(x)
    np.testing.assert_allclose(u[:, 0], x[:, 0])
    np.testing.assert_allclose(u[:, 1], x[:, 1] + ch.eta * x[:, 0])
    np.testing.assert_allclose(ch.inverse(u), x)
    # drift in (y, z) is the pushed-forward drift
    np.testing.assert_allclose(m.base.drift(u), m.drift(x) @ ch.matrix.T)


def test_colored_noise_default_eta_and_constants():
    m = colored_noise("x^2/2", 1.0, 1.0)
    dec = m.decomposition
    assert m.change.eta == 2.0
    assert (dec.n, dec.m) == (1, 1)
    assert (dec.rho1, dec.L1, dec.L2, dec.L3, dec.theta) == (3.0, 1.0, 4.0, 1.0, 1.0)
    assert dec.check_sigma(m.base.sigma)


@pytest.mark.parametrize("V", ["x^2/2", "x^2/2 + 0.5*cos(x)"])
def test_colored_noise_block_inequalities(V, rng):
    yz = colored_noise(V, 1.0, 1.0).base
    dec = yz.decomposition
    u = rng.uniform(-4, 4, size=(500, 2))
    v = rng.uniform(-4, 4, size=(500, 2))
    db = yz.drift(u) - yz.drift(v)
    dy, dz = (u - v)[:, 0], (u - v)[:, 1]
    ay, az = np.abs(dy), np.abs(dz)
    assert np.all(dy * db[:, 0] <= -dec.rho1 * ay**2 + dec.L1 * ay * az + 1e-9)
    assert np.all(dz * db[:, 1] <= dec.L2 * ay * az + dec.L3 * az**2 + 1e-9)


def test_colored_noise_metric_contracts(rng):
    yz = colored_noise("x^2/2", 1.0, 1.0).base
    met = yz.metric
    B = yz.jacobian(np.zeros(2))
    np.testing.assert_allclose(B.T @ met.Q + met.Q @ B, -np.eye(2), atol=1e-12)
    d = rng.normal(size=(200, 2))
    lhs = np.einsum("ij,jk,ik->i", d, met.Q, d @ B.T)
    assert np.all(lhs <= -met.rho2 * met.qnorm(d) ** 2 + 1e-12)
