"""Diffusion models dX = b(X) dt + sigma dB with their curvature data.

Every evaluator is batched: states have shape ``(..., d)``, drifts return
``(..., d)``, Jacobians ``(..., d, d)`` and curvature bounds ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.linalg

from .expr import ScalarExpr, parse_expression

__all__ = [
    "DriftModel",
    "StateDecomposition",
    "MetricChange",
    "ColoredNoiseChange",
    "builtin_model",
    "overdamped1d",
    "ornstein_uhlenbeck",
    "kinetic_langevin",
    "colored_noise",
    "sym_max_eig",
    "SCAN_GRID",
]

# Grid used for numerical suprema of 1D curvature quantities.
SCAN_GRID = np.linspace(-10.0, 10.0, 20001)

Array = np.ndarray


def sym_max_eig(J: Array) -> Array:
    """Largest eigenvalue of the symmetric part of a stack of square matrices."""
    J = np.asarray(J, dtype=float)
    d = J.shape[-1]
    if d == 1:
        return J[..., 0, 0].copy()
    S = 0.5 * (J + np.swapaxes(J, -1, -2))
    if d == 2:
        a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 1, 1]
        return 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)
    return np.linalg.eigvalsh(S)[..., -1]


@dataclass(frozen=True)
class StateDecomposition:
    """Block split x = (y, z) with the rate constants of the coupling argument."""

    n: int
    m: int
    rho1: float
    L1: float
    L2: float
    L3: float
    theta: float
    sigma_tilde: Array | None = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("block sizes must be positive")
        for name in ("rho1", "L1", "L2", "L3", "theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def dim(self) -> int:
        return self.n + self.m

    def check_sigma(self, sigma: Array, tol: float = 1e-12) -> bool:
        """True when sigma sigma^T - theta^2 blockdiag(0, I_m) is positive semidefinite."""
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if sigma.shape[0] != self.dim:
            raise ValueError("sigma has the wrong number of rows")
        resid = sigma @ sigma.T
        resid[self.n :, self.n :] -= self.theta**2 * np.eye(self.m)
        scale = max(1.0, float(np.abs(sigma @ sigma.T).max()))
        return bool(np.linalg.eigvalsh(0.5 * (resid + resid.T))[0] >= -tol * scale)


@dataclass(frozen=True, eq=False)
class MetricChange:
    """A positive definite metric Q with its square roots and the far-field rate."""

    Q: Array
    rho2: float
    S_star: float
    sqrt: Array = field(init=False, repr=False)
    inv_sqrt: Array = field(init=False, repr=False)

    MIN_EIG = 1e-12

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1]:
            raise ValueError("Q must be square")
        if not np.allclose(Q, Q.T, rtol=1e-12, atol=1e-14):
            raise ValueError("Q must be symmetric")
        Q = 0.5 * (Q + Q.T)
        w, U = np.linalg.eigh(Q)
        if w[0] < self.MIN_EIG:
            raise ValueError(f"Q is not positive definite enough (min eigenvalue {w[0]:.3e})")
        if not (self.rho2 > 0 and self.S_star > 0):
            raise ValueError("rho2 and S_star must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "sqrt", (U * np.sqrt(w)) @ U.T)
        object.__setattr__(self, "inv_sqrt", (U / np.sqrt(w)) @ U.T)

    @property
    def norm(self) -> float:
        """Operator norm |Q|."""
        return float(np.linalg.eigvalsh(self.Q)[-1])

    def block_norm(self, n: int) -> float:
        """Operator norm of the trailing diagonal block Q[n:, n:]."""
        return float(np.linalg.eigvalsh(self.Q[n:, n:])[-1])

    def qnorm(self, dx: Array) -> Array:
        """||dx||_Q = |Q^{1/2} dx| over the last axis."""
        return np.linalg.norm(np.asarray(dx) @ self.sqrt.T, axis=-1)


@dataclass(frozen=True, eq=False)
class ColoredNoiseChange:
    """Linear map (q, w) -> (y, z) = (q, w + eta A^T q)."""

    A: Array
    eta: float

    @property
    def matrix(self) -> Array:
        n, m = self.A.shape
        P = np.eye(n + m)
        P[n:, :n] = self.eta * self.A.T
        return P

    def forward(self, x: Array) -> Array:
        n = self.A.shape[0]
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[..., n:] = x[..., n:] + self.eta * x[..., :n] @ self.A
        return out

    def inverse(self, u: Array) -> Array:
        n = self.A.shape[0]
        u = np.asarray(u, dtype=float)
        out = u.copy()
        out[..., n:] = u[..., n:] - self.eta * u[..., :n] @ self.A
        return out


@dataclass(frozen=True, eq=False)
class DriftModel:
    """A diffusion with constant noise matrix.

    ``eta`` is a pointwise upper bound on the top eigenvalue of the symmetric
    part of the Jacobian; in 1D it is the derivative b' itself.
    """

    dim: int
    drift: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]
    eta: Callable[[Array], Array]
    sigma: Array
    L: float
    lambda_star: float | None = None
    lambda_star_exact: bool = False
    kind: str = "custom"
    params: Mapping[str, object] = field(default_factory=dict)
    potential: ScalarExpr | None = None
    decomposition: StateDecomposition | None = None
    metric: MetricChange | None = None
    change: ColoredNoiseChange | None = None
    base: "DriftModel | None" = None

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape[0] != self.dim:
            raise ValueError(f"sigma must have {self.dim} rows, got shape {sigma.shape}")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def noise_dim(self) -> int:
        return self.sigma.shape[1]

    @property
    def is_gradient_1d(self) -> bool:
        return self.dim == 1 and self.potential is not None

    def eta_metric(self, x: Array, metric: MetricChange) -> Array:
        """Curvature bound in the Q-weighted geometry: top eigenvalue of sym(Q^{1/2} Jb Q^{-1/2})."""
        J = self.jacobian(np.asarray(x, dtype=float))
        return sym_max_eig(metric.sqrt @ J @ metric.inv_sqrt)

    def sigma_sq_1d(self) -> float:
        if self.dim != 1:
            raise ValueError("model is not one-dimensional")
        return float((self.sigma @ self.sigma.T)[0, 0])


def _as_expr(src, params=None) -> ScalarExpr:
    if isinstance(src, ScalarExpr):
        return src
    return parse_expression(str(src), params or {})


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (value > 0 and np.isfinite(value)):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def overdamped1d(U, theta: float, params: Mapping[str, float] | None = None) -> DriftModel:
    """dX = -U'(X) dt + sqrt(2) theta dB in one dimension."""
    theta = _positive("theta", theta)
    U = _as_expr(U, params)
    dU = U.derivative()
    d2U = dU.derivative()

    def drift(x):
        return -dU(np.asarray(x, dtype=float)[..., 0])[..., None]

    def jacobian(x):
        return -d2U(np.asarray(x, dtype=float)[..., 0])[..., None, None]

    def eta(x):
        return -d2U(np.asarray(x, dtype=float)[..., 0])

    sup_eta = float(np.max(-d2U(SCAN_GRID)))
    return DriftModel(
        dim=1,
        drift=drift,
        jacobian=jacobian,
        eta=eta,
        sigma=np.array([[np.sqrt(2.0) * theta]]),
        L=sup_eta,
        lambda_star=-sup_eta,
        lambda_star_exact=False,
        kind="overdamped1d",
        params={"U": str(U), "theta": theta, **dict(params or {})},
        potential=U,
    )


def ornstein_uhlenbeck(rate: float, d: int = 1, theta: float = 1.0) -> DriftModel:
    """dX = -rate X dt + sqrt(2) theta dB; rate 0 gives Brownian motion."""
    rate = float(rate)
    if rate < 0 or not np.isfinite(rate):
        raise ValueError(f"rate must be non-negative, got {rate}")
    theta = _positive("theta", theta)
    d = int(d)
    if d < 1:
        raise ValueError("dimension must be positive")
    A = -rate * np.eye(d)

    def drift(x):
        return -rate * np.asarray(x, dtype=float)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (d, d)).copy()

    def eta(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], -rate)

    return DriftModel(
        dim=d,
        drift=drift,
        jacobian=jacobian,
        eta=eta,
        sigma=np.sqrt(2.0) * theta * np.eye(d),
        L=-rate,
        lambda_star=rate,
        lambda_star_exact=True,
        kind="ornstein_uhlenbeck",
        params={"rate": rate, "d": d, "theta": theta},
    )


def linear_model(A, sigma=None) -> DriftModel:
    """dX = A X dt + sigma dB for a constant matrix A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d):
        raise ValueError("A must be square")
    sigma = np.eye(d) if sigma is None else np.atleast_2d(np.asarray(sigma, dtype=float))
    top = float(sym_max_eig(A))

    def drift(x):
        return np.asarray(x, dtype=float) @ A.T

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (d, d)).copy()

    def eta(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], top)

    return DriftModel(
        dim=d, drift=drift, jacobian=jacobian, eta=eta, sigma=sigma, L=top,
        lambda_star=-top, lambda_star_exact=True, kind="linear",
        params={"A": A.tolist()},
    )


def _scan_curvature(d2V: ScalarExpr) -> tuple[float, float]:
    vals = d2V(SCAN_GRID)
    return float(vals.min()), float(vals.max())


def _numeric_eta(jacobian):
    def eta(x):
        return sym_max_eig(jacobian(np.asarray(x, dtype=float)))

    return eta


def kinetic_langevin(V, gamma: float, theta: float = 1.0, d: int = 1,
                     params: Mapping[str, float] | None = None) -> DriftModel:
    """Underdamped Langevin on (q, p) in R^{2d} with separable potential sum_i V(q_i).

    b(q, p) = (p, -grad V(q) - gamma p); noise sqrt(2) theta on the momenta.
    """
    gamma = _positive("gamma", gamma)
    theta = _positive("theta", theta)
    d = int(d)
    if d < 1:
        raise ValueError("dimension must be positive")
    V = _as_expr(V, params)
    dV = V.derivative()
    d2V = dV.derivative()
    I = np.eye(d)

    def drift(x):
        x = np.asarray(x, dtype=float)
        q, p = x[..., :d], x[..., d:]
        return np.concatenate([p, -dV(q) - gamma * p], axis=-1)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (2 * d, 2 * d))
        J[..., :d, d:] = I
        idx = np.arange(d)
        J[..., d + idx, idx] = -d2V(x[..., :d])
        J[..., d:, d:] -= gamma * I
        return J

    # The symmetric Jacobian part depends on q only through V''(q_i); scanning
    # V'' over a grid bounds its top eigenvalue.
    lo, hi = _scan_curvature(d2V)
    tops = []
    for c in (lo, hi):
        Jc = np.array([[0.0, 1.0], [-c, -gamma]])
        tops.append(float(sym_max_eig(Jc)))
    L = max(tops)
    sigma = np.zeros((2 * d, d))
    sigma[d:, :] = np.sqrt(2.0) * theta * I
    return DriftModel(
        dim=2 * d,
        drift=drift,
        jacobian=jacobian,
        eta=_numeric_eta(jacobian),
        sigma=sigma,
        L=L,
        lambda_star=-L,
        kind="kinetic_langevin",
        params={"V": str(V), "gamma": gamma, "theta": theta, "d": d, **dict(params or {})},
        potential=V,
    )


def colored_noise(V, A=1.0, sigma0=1.0, eta_cv: float | None = None,
                  params: Mapping[str, float] | None = None,
                  metric: MetricChange | None = None) -> DriftModel:
    """Position driven by an Ornstein-Uhlenbeck colour process.

    dq = (-grad V(q) + A w) dt,  dw = -w dt + sigma0 dB, with V separable.
    The returned model lives in the original (q, w) coordinates; its
    ``base`` attribute is ``None`` and :func:`colored_noise_yz` gives the
    model in the (y, z) coordinates that carry the block decomposition.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n, m = A.shape
    sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
    if sigma0.shape == (1, 1) and m > 1:
        sigma0 = sigma0[0, 0] * np.eye(m)
    if sigma0.shape != (m, m):
        raise ValueError(f"sigma0 must be {m}x{m}, got {sigma0.shape}")
    if abs(np.linalg.det(sigma0)) < 1e-14:
        raise ValueError("sigma0 must be non-singular")
    svals = np.linalg.svd(A, compute_uv=False)
    if len(svals) < n or svals[n - 1] <= 1e-12:
        raise ValueError("A must be surjective (rank n)")
    smin = float(svals[n - 1])
    V = _as_expr(V, params)
    dV = V.derivative()
    d2V = dV.derivative()
    lo, hi = _scan_curvature(d2V)
    L_V = max(-lo, 0.0)
    lip = max(abs(lo), abs(hi))
    if eta_cv is None:
        eta_cv = max(2.0 * L_V / smin**2, 2.0 / smin**2)
    eta_cv = _positive("eta_cv", eta_cv)

    d = n + m

    def drift(x):
        x = np.asarray(x, dtype=float)
        q, w = x[..., :n], x[..., n:]
        return np.concatenate([-dV(q) + w @ A.T, -w], axis=-1)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (d, d))
        idx = np.arange(n)
        J[..., idx, idx] = -d2V(x[..., :n])
        J[..., :n, n:] = A
        J[..., n:, n:] = -np.eye(m)
        return J

    sigma = np.zeros((d, m))
    sigma[n:, :] = sigma0

    tops = []
    for c in (lo, hi):
        Jc = np.zeros((d, d))
        Jc[:n, :n] = -c * np.eye(n)
        Jc[:n, n:] = A
        Jc[n:, n:] = -np.eye(m)
        tops.append(float(sym_max_eig(Jc)))
    L = max(tops)

    change = ColoredNoiseChange(A=A, eta=eta_cv)
    G = eta_cv * A.T @ A - np.eye(m)
    L3 = float(np.linalg.eigvalsh(0.5 * (G + G.T))[-1])
    if L3 <= 0:
        raise ValueError("eta_cv A^T A - I has no positive eigenvalue; increase eta_cv")
    normA = float(svals[0])
    rho1 = eta_cv * smin**2 + lo
    if rho1 <= 0:
        raise ValueError("eta_cv too small for the y-block to be dissipative")
    theta2 = float(np.linalg.eigvalsh(sigma0 @ sigma0.T)[0])
    decomposition = StateDecomposition(
        n=n,
        m=m,
        rho1=rho1,
        L1=normA,
        L2=eta_cv * normA * (lip + float(np.linalg.norm(G, 2))),
        L3=L3,
        theta=float(np.sqrt(theta2)),
    )

    P = change.matrix
    Pinv = np.linalg.inv(P)

    def drift_yz(u):
        return drift(change.inverse(u)) @ P.T

    def jacobian_yz(u):
        return P @ jacobian(change.inverse(u)) @ Pinv

    if metric is None and hi - lo < 1e-12:
        # Quadratic V: the (y, z) dynamics are linear and a Lyapunov equation
        # gives a metric in which they contract at every scale.
        B = jacobian_yz(np.zeros(d))
        if np.linalg.eigvals(B).real.max() < 0:
            Q = scipy.linalg.solve_continuous_lyapunov(B.T, -np.eye(d))
            Q = 0.5 * (Q + Q.T)
            metric = MetricChange(Q=Q, rho2=1.0 / (2.0 * float(np.linalg.eigvalsh(Q)[-1])), S_star=1.0)

    yz = DriftModel(
        dim=d,
        drift=drift_yz,
        jacobian=jacobian_yz,
        eta=_numeric_eta(jacobian_yz),
        sigma=sigma,
        L=float("nan"),
        kind="colored_noise_yz",
        params={"V": str(V), "A": A.tolist(), "sigma0": sigma0.tolist(), "eta_cv": eta_cv},
        potential=V,
        decomposition=decomposition,
        metric=metric,
        change=change,
    )
    # Recompute L in (y, z) from the same curvature extremes.
    tops_yz = []
    for c in (lo, hi):
        Jc = np.zeros((d, d))
        Jc[:n, :n] = -c * np.eye(n)
        Jc[:n, n:] = A
        Jc[n:, n:] = -np.eye(m)
        tops_yz.append(float(sym_max_eig(P @ Jc @ Pinv)))
    object.__setattr__(yz, "L", max(tops_yz))
    object.__setattr__(yz, "lambda_star", -max(tops_yz))

    return DriftModel(
        dim=d,
        drift=drift,
        jacobian=jacobian,
        eta=_numeric_eta(jacobian),
        sigma=sigma,
        L=L,
        lambda_star=-L,
        kind="colored_noise",
        params={"V": str(V), "A": A.tolist(), "sigma0": sigma0.tolist(), "eta_cv": eta_cv},
        potential=V,
        decomposition=decomposition,
        metric=metric,
        change=change,
        base=yz,
    )


def colored_noise_yz(model: DriftModel) -> DriftModel:
    """The (y, z)-coordinate version of a colored-noise model."""
    if model.kind != "colored_noise" or model.base is None:
        raise ValueError("not a colored-noise model")
    return model.base


_BUILDERS = {
    "overdamped1d": overdamped1d,
    "ornstein_uhlenbeck": ornstein_uhlenbeck,
    "kinetic_langevin": kinetic_langevin,
    "colored_noise": colored_noise,
    "linear": linear_model,
}


def builtin_model(kind: str, **params) -> DriftModel:
    """Build one of the named model families.

    >>> builtin_model("ornstein_uhlenbeck", rate=1.0, d=1, theta=1.0).lambda_star
    1.0
    """
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(_BUILDERS)}") from None
    return builder(**params)
