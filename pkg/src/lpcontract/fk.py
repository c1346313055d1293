"""Leading eigenvalue of the one-dimensional Feynman-Kac operator.

The operator is ``L f = b f' + (sigma^2 / 2) f'' + p eta f`` on a truncated
interval, discretized with the centred three-point stencil.  Its top
eigenvalue J(p eta) decides whether synchronous coupling contracts in L^p.

Two solvers are provided.  The default symmetrizes the tridiagonal matrix by
a diagonal similarity and bisects with Sturm sequence counts; the fallback
is a Perron-shifted power iteration on the original matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .models import DriftModel, overdamped1d
from .parallel import ordered_map

__all__ = [
    "FKDiscretization",
    "EigenResult",
    "SweepResult",
    "NonConvergenceError",
    "build_operator",
    "leading_eigenvalue",
    "sturm_count_below",
    "sweep",
    "DEFAULT_DOMAIN",
    "DEFAULT_DX",
]

DEFAULT_DOMAIN = (-5.0, 5.0)
DEFAULT_DX = 1e-3
BOUNDARIES = ("reflecting", "dirichlet")
MIN_NODES = 10


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class FKDiscretization:
    """Three-point discretization of L_{p eta} on [x_min, x_max].

    ``sub``, ``diag`` and ``sup`` hold the raw stencil at every node (the
    coefficients of f_{i-1}, f_i, f_{i+1} in row i).  :meth:`bands` applies
    the boundary condition and returns the assembled matrix bands.
    """

    x: np.ndarray
    dx: float
    p: float
    sigma2: float
    b: np.ndarray
    peta: np.ndarray
    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    boundary: str = "reflecting"

    @property
    def n(self) -> int:
        return self.diag.size

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[-1])

    def bands(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(lower, diag, upper) of the assembled matrix.

        With a reflecting boundary the ghost values f_{-1} = f_1 and
        f_{n} = f_{n-2} fold the outer coefficients back into the matrix,
        so every row sums to p eta_i.  With Dirichlet truncation the end
        nodes carry f = 0 and are removed.
        """
        if self.boundary == "dirichlet":
            return self.sub[2:-1].copy(), self.diag[1:-1].copy(), self.sup[1:-2].copy()
        lower = self.sub[1:].copy()
        upper = self.sup[:-1].copy()
        upper[0] += self.sub[0]
        lower[-1] += self.sup[-1]
        return lower, self.diag.copy(), upper

    def dense(self) -> np.ndarray:
        lower, d, upper = self.bands()
        return np.diag(d) + np.diag(upper, 1) + np.diag(lower, -1)

    def symmetrizable(self) -> bool:
        lower, _, upper = self.bands()
        return bool(np.all(lower * upper > 0))

    def log_symmetrizer(self) -> np.ndarray:
        """log D for the diagonal D making D^{-1} A D symmetric, with D_0 = 1.

        For b = -U' and sigma^2 = 2 theta^2 this is U/(2 theta^2) up to an
        additive constant and an O(dx^2) error.
        """
        lower, _, upper = self.bands()
        if not np.all(lower * upper > 0):
            raise ValueError("off-diagonal products must be positive (refine dx)")
        steps = 0.5 * (np.log(lower) - np.log(upper))
        return np.concatenate([[0.0], np.cumsum(steps)])

    def symmetric_bands(self) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal and off-diagonal of the symmetrized matrix."""
        lower, d, upper = self.bands()
        if not np.all(lower * upper > 0):
            raise ValueError("off-diagonal products must be positive (refine dx)")
        return d, np.sqrt(upper * lower)


def build_operator(model: DriftModel, p: float, domain: Sequence[float] = DEFAULT_DOMAIN,
                   dx: float = DEFAULT_DX, boundary: str = "reflecting", eta=None) -> FKDiscretization:
    """Assemble L_{p eta} for a one-dimensional model.

    >>> from lpcontract.models import ornstein_uhlenbeck
    >>> op = build_operator(ornstein_uhlenbeck(0.0), 0.0, (-2, 2), 0.5)
    >>> float(op.diag[3]), float(op.sup[3]), float(op.sub[3])
    (-8.0, 4.0, 4.0)
    """
    if model.dim != 1:
        raise ValueError("the Feynman-Kac eigensolver is one-dimensional")
    if boundary not in BOUNDARIES:
        raise ValueError(f"boundary must be one of {BOUNDARIES}")
    if not dx > 0:
        raise ValueError("dx must be positive")
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise ValueError("domain must satisfy x_min < x_max")
    n = int(round((hi - lo) / dx)) + 1
    if n < MIN_NODES + (2 if boundary == "dirichlet" else 0):
        raise ValueError(f"domain holds only {n} nodes at dx={dx}; need at least {MIN_NODES}")
    x = lo + dx * np.arange(n)
    x[-1] = hi
    b = model.drift(x[:, None])[:, 0]
    eta_v = (model.eta if eta is None else eta)(x[:, None])
    sigma2 = model.sigma_sq_1d()
    return _assemble(x, dx, float(p), sigma2, b, np.asarray(eta_v, dtype=float), boundary)


def _assemble(x, dx, p, sigma2, b, eta_v, boundary) -> FKDiscretization:
    diff = sigma2 / (2.0 * dx * dx)
    adv = b / (2.0 * dx)
    peta = p * eta_v
    return FKDiscretization(
        x=x, dx=dx, p=p, sigma2=sigma2, b=b, peta=peta,
        sub=diff - adv, diag=-sigma2 / (dx * dx) + peta, sup=diff + adv, boundary=boundary,
    )


# ---------------------------------------------------------------------------
# Sturm bisection


def sturm_count_below(d, e2, lam: float) -> int:
    """Number of eigenvalues of the symmetric tridiagonal (d, e) below ``lam``.

    ``e2`` holds the squared off-diagonal.  Counts the negative pivots of
    the LDL^T factorization of T - lam I.
    """
    neg = 0
    q = d[0] - lam
    if q == 0.0:
        q = -1e-300
    if q < 0.0:
        neg += 1
    for i in range(1, len(d)):
        q = (d[i] - lam) - e2[i - 1] / q
        if q == 0.0:
            q = -1e-300
        if q < 0.0:
            neg += 1
    return neg


def _sturm_count_below_many(d: np.ndarray, e2: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sturm_count_below` over a leading batch axis."""
    n = d.shape[1]
    q = d[:, 0] - lam
    q[q == 0.0] = -1e-300
    neg = (q < 0.0).astype(np.int64)
    # a pivot nudged off zero may overflow the next quotient; +-inf is the right limit
    with np.errstate(over="ignore"):
        for i in range(1, n):
            q = (d[:, i] - lam) - e2[:, i - 1] / q
            q[q == 0.0] = -1e-300
            neg += q < 0.0
    return neg


def _gershgorin_top(d, e):
    absE = np.abs(e)
    r = np.zeros_like(d)
    r[..., :-1] += absE
    r[..., 1:] += absE
    return np.max(d + r, axis=-1)


def _bisect_top(d: list, e2: list, lo: float, hi: float, tol: float, max_iter: int):
    n = len(d)
    # Widen the lower end until at least one eigenvalue lies above it.
    width = max(1.0, hi - lo)
    while sturm_count_below(d, e2, lo) == n:
        lo -= width
        width *= 2.0
    it = 0
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if sturm_count_below(d, e2, mid) == n:
            hi = mid
        else:
            lo = mid
        it += 1
    return lo, hi, it


def _bisect_top_many(d: np.ndarray, e2: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float, max_iter: int):
    n = d.shape[1]
    lo = lo.copy()
    hi = hi.copy()
    width = np.maximum(1.0, hi - lo)
    for _ in range(64):
        low_all = _sturm_count_below_many(d, e2, lo) == n
        if not low_all.any():
            break
        lo = np.where(low_all, lo - width, lo)
        width = np.where(low_all, 2.0 * width, width)
    it = 0
    active = hi - lo > tol
    while active.any() and it < max_iter:
        mid = 0.5 * (lo + hi)
        active &= (mid > lo) & (mid < hi)
        if not active.any():
            break
        above_none = _sturm_count_below_many(d, e2, mid) == n
        hi = np.where(active & above_none, mid, hi)
        lo = np.where(active & ~above_none, mid, lo)
        active &= hi - lo > tol
        it += 1
    return lo, hi, it


@dataclass(frozen=True)
class EigenResult:
    value: float
    vector: np.ndarray
    iterations: int
    method: str
    residual: float
    converged: bool


def _inverse_iteration(d: np.ndarray, off: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    n = d.size
    scale = max(1.0, float(np.max(np.abs(d))))
    shift = lam + 1e-10 * scale
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1] = d - shift
    ab[2, :-1] = off
    v = np.ones(n) / math.sqrt(n)
    for _ in range(3):
        w = scipy.linalg.solve_banded((1, 1), ab, v)
        v = w / np.linalg.norm(w)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    Tv = d * v
    Tv[:-1] += off * v[1:]
    Tv[1:] += off * v[:-1]
    return v, float(np.linalg.norm(Tv - lam * v))


def _power_iteration(op: FKDiscretization, tol: float, max_iter: int):
    lower, d, upper = op.bands()
    if np.any(lower < 0) or np.any(upper < 0):
        raise NonConvergenceError(
            "power iteration needs non-negative off-diagonals; refine dx so that |b| dx < sigma^2"
        )
    shift = -float(np.min(d))
    dd = d + shift

    def mul(v):
        w = dd * v
        w[:-1] += upper * v[1:]
        w[1:] += lower * v[:-1]
        return w

    def mul_t(v):
        w = dd * v
        w[1:] += upper * v[:-1]
        w[:-1] += lower * v[1:]
        return w

    n = d.size
    x = np.ones(n) / math.sqrt(n)
    y = x.copy()
    lam = float("nan")
    err = float("inf")
    it = 0
    check = 50
    converged = False
    while it < max_iter:
        for _ in range(check):
            x = mul(x)
            x /= np.linalg.norm(x)
            y = mul_t(y)
            y /= np.linalg.norm(y)
        it += check
        Ax = mul(x)
        yx = float(y @ x)
        mu = float(y @ Ax) / yx
        lam = mu - shift
        if not np.isfinite(lam):
            raise NonConvergenceError("power iteration produced a non-finite estimate")
        # the two-sided Rayleigh quotient is off by at most |r_x| |r_y| / (y.x)
        err = float(np.linalg.norm(Ax - mu * x) * np.linalg.norm(mul_t(y) - mu * y) / abs(yx))
        if err <= tol * max(1.0, abs(lam)):
            converged = True
            break
    residual = float(np.linalg.norm(mul(x) - (lam + shift) * x))
    if np.any(x < -1e-12):
        raise NonConvergenceError("power iteration vector lost positivity (complex pair suspected)", residual)
    return lam, x, it, residual, converged


def leading_eigenvalue(op: FKDiscretization, tol: float = 1e-10, method: str = "auto",
                       max_iter: int = 1_000_000) -> EigenResult:
    """Largest eigenvalue of the discretized operator.

    ``method`` is ``"sturm"`` (symmetrize, bisect, then one inverse
    iteration for the eigenvector), ``"power"`` (shifted power iteration)
    or ``"auto"``, which picks Sturm whenever the matrix is symmetrizable.
    The returned vector is an eigenvector of the original matrix,
    normalized to unit length and positive.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method == "auto":
        method = "sturm" if op.symmetrizable() else "power"
    if method == "power":
        lam, v, it, res, ok = _power_iteration(op, tol, max_iter)
        if not ok:
            raise NonConvergenceError(f"power iteration did not converge in {max_iter} iterations", res)
        return EigenResult(lam, v, it, "power", res, True)
    if method != "sturm":
        raise ValueError(f"unknown method {method!r}")
    d, off = op.symmetric_bands()
    e2 = off * off
    hi = float(_gershgorin_top(d, off))
    lo = float(np.max(d))
    lo_b, hi_b, it = _bisect_top(d.tolist(), e2.tolist(), lo, hi, tol, 400)
    lam = 0.5 * (lo_b + hi_b)
    u, res = _inverse_iteration(d, off, lam)
    logD = op.log_symmetrizer()
    f = u * np.exp(logD - logD.max())
    f /= np.linalg.norm(f)
    return EigenResult(lam, f, it, "sturm", res, bool(np.isfinite(lam)))


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True, eq=False)
class SweepResult:
    p: np.ndarray
    theta2: np.ndarray
    values: np.ndarray  # J(p eta)/p, shape (len(p), len(theta2))
    converged: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.p.size, self.theta2.size) or self.converged.shape != self.values.shape:
            raise ValueError("sweep matrix does not match its grids")

    def rows(self):
        """(p, theta2, J/p, converged) in p-major order."""
        for i, p in enumerate(self.p):
            for j, t2 in enumerate(self.theta2):
                yield float(p), float(t2), float(self.values[i, j]), bool(self.converged[i, j])


def sweep(potential, p_grid: Sequence[float], theta2_grid: Sequence[float],
          domain: Sequence[float] = DEFAULT_DOMAIN, dx: float = DEFAULT_DX,
          boundary: str = "reflecting", tol: float = 1e-10, params=None,
          threads: int | None = None) -> SweepResult:
    """J(p eta)/p over a (p, theta^2) grid for the overdamped family of ``potential``.

    Each cell is solved independently by vectorized Sturm bisection; cells
    whose matrix cannot be symmetrized are flagged as not converged.
    """
    P = np.asarray(p_grid, dtype=float).ravel()
    T2 = np.asarray(theta2_grid, dtype=float).ravel()
    if P.size == 0 or T2.size == 0:
        raise ValueError("sweep grids must be non-empty")
    if np.any(P <= 0):
        raise ValueError("p values must be positive")
    if np.any(T2 <= 0):
        raise ValueError("theta^2 values must be positive")

    cells = [(i, j) for i in range(P.size) for j in range(T2.size)]
    ops = []
    for i, j in cells:
        model = overdamped1d(potential, math.sqrt(T2[j]), params)
        ops.append(build_operator(model, P[i], domain, dx, boundary))

    ok = np.array([op.symmetrizable() for op in ops])
    values = np.full(len(cells), np.nan)
    conv = np.zeros(len(cells), dtype=bool)
    good = np.flatnonzero(ok)
    if good.size:
        sym = [ops[k].symmetric_bands() for k in good]
        d = np.stack([s[0] for s in sym])
        off = np.stack([s[1] for s in sym])
        e2 = off * off
        hi = _gershgorin_top(d, off)
        lo = d.max(axis=1)
        nthreads = max(1, min(len(good), threads or 1))
        chunks = np.array_split(np.arange(good.size), nthreads)

        def solve(idx):
            if idx.size == 0:
                return idx, np.empty(0), np.empty(0)
            l, h, _ = _bisect_top_many(d[idx], e2[idx], lo[idx], hi[idx], tol, 400)
            return idx, l, h

        for idx, l, h in ordered_map(solve, chunks, threads):
            values[good[idx]] = 0.5 * (l + h)
            conv[good[idx]] = np.isfinite(l) & np.isfinite(h)
    vals = values.reshape(P.size, T2.size) / P[:, None]
    return SweepResult(P, T2, vals, conv.reshape(P.size, T2.size))
