"""Monte Carlo estimation of kappa_p(t), G_p(x, t) and the Lyapunov exponent.

kappa_p(t) is the worst case, over start points x and unit directions v,
of the L^p norm of the tangent flow |Phi_t v|.  The supremum over x is taken
on a finite grid (see :class:`SupSearchSpec`); the flow is simulated with
:func:`lpcontract.sde.simulate_ensemble`, which uses the same noise for every
grid point, so comparisons across x, t and p share random numbers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import DriftModel
from .rng import DIRECTIONS, block_generator
from .sde import Ensemble, simulate_ensemble

__all__ = [
    "McEstimate",
    "SupSearchSpec",
    "KappaResult",
    "LyapunovResult",
    "estimate_kappa_p",
    "estimate_kappa_curve",
    "estimate_Gp",
    "estimate_lyapunov",
    "check_submultiplicativity",
    "check_monotone_p",
    "check_bakry_emery",
    "EXP_CLAMP",
]

EXP_CLAMP = 1e300
# zero-variance cases can tie exactly; allow for the rounding of products and roots
_ROUNDOFF = 1e-12
LOG_CLAMP = math.log(EXP_CLAMP)


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n: int
    excluded: int = 0
    saturated: int = 0

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("standard error must be non-negative")
        if self.excluded > self.n:
            raise ValueError("excluded count exceeds sample count")


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    if n == 0:
        return float("nan"), float("nan")
    with np.errstate(over="ignore"):
        m = float(np.mean(samples))
        se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return m, se


def _pth_root(mean: float, se: float, p: float) -> tuple[float, float]:
    """(m^{1/p}, delta-method SE)."""
    if mean <= 0:
        return 0.0, (0.0 if se == 0 else float("inf"))
    v = mean ** (1.0 / p)
    return v, v * se / (p * mean)


@dataclass(frozen=True)
class SupSearchSpec:
    """Start points (G, d) and the direction strategy for the supremum.

    In one dimension the direction is fixed to v = 1.  In higher dimension
    the candidates are the coordinate directions plus ``n_random`` uniform
    unit vectors, and the best candidate is refined by ``refine_steps``
    fixed-point iterations of the first-order optimality condition.
    """

    points: np.ndarray
    directions: np.ndarray | None = None
    n_random: int = 32
    refine_steps: int = 10
    direction_seed: int = 0

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 1 and pts.shape[1] > 1 and np.asarray(self.points).ndim == 1:
            pts = pts.T
        if pts.size == 0:
            raise ValueError("the start-point grid must be non-empty")
        object.__setattr__(self, "points", pts)
        if self.directions is not None:
            dirs = np.atleast_2d(np.asarray(self.directions, dtype=float))
            if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-12):
                raise ValueError("directions must be unit vectors")
            object.__setattr__(self, "directions", dirs)

    @classmethod
    def grid_1d(cls, lo: float = -3.0, hi: float = 3.0, step: float = 0.25) -> "SupSearchSpec":
        n = int(round((hi - lo) / step)) + 1
        return cls(points=(lo + step * np.arange(n))[:, None])

    @classmethod
    def default(cls, dim: int, **kw) -> "SupSearchSpec":
        if dim == 1:
            return cls.grid_1d()
        axis = np.arange(-3.0, 3.0 + 0.5, 1.0)
        mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
        return cls(points=mesh, **kw)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def candidate_directions(self) -> np.ndarray:
        d = self.dim
        if self.directions is not None:
            return self.directions
        if d == 1:
            return np.ones((1, 1))
        gen = block_generator(self.direction_seed, 0, DIRECTIONS)
        r = gen.standard_normal((self.n_random, d))
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        return np.concatenate([np.eye(d), r])

    def is_edge(self, idx: int) -> bool:
        """True when the start point lies on the bounding box of the grid."""
        pt = self.points[idx]
        return bool(np.any(pt <= self.points.min(axis=0)) or np.any(pt >= self.points.max(axis=0)))


@dataclass(frozen=True)
class KappaResult:
    estimate: McEstimate
    argmax_x: np.ndarray
    argmax_v: np.ndarray
    t: float
    p: float
    per_point: np.ndarray = field(repr=False)
    edge_warning: bool = False


def _objective(phi: np.ndarray, v: np.ndarray, p: float) -> tuple[float, float]:
    w = np.linalg.norm(phi @ v, axis=-1) if phi.shape[-1] > 1 else np.abs(phi[:, 0, 0] * v[0])
    return _mean_se(w**p)


def _refine(phi: np.ndarray, v: np.ndarray, p: float, steps: int) -> np.ndarray:
    for _ in range(steps):
        u = phi @ v
        r = np.linalg.norm(u, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            wgt = np.where(r > 0, r ** (p - 2.0), 0.0)
        g = np.einsum("n,nji,nj->i", wgt, phi, u) / phi.shape[0]
        nrm = np.linalg.norm(g)
        if not nrm > 0 or not np.isfinite(nrm):
            break
        v = g / nrm
    return v


def _kappa_at(ens: Ensemble, ci: int, p: float, spec: SupSearchSpec, t: float) -> KappaResult:
    phi_all = ens.phi[ci]
    G = phi_all.shape[0]
    dirs = spec.candidate_directions()
    best = None
    per_point = np.empty(G)
    for g in range(G):
        alive = ens.alive[g]
        phi = phi_all[g][alive]
        if phi.shape[0] == 0:
            raise RuntimeError(f"all paths diverged from start point {spec.points[g]}")
        scores = [(_objective(phi, v, p), v) for v in dirs]
        (m, se), v = max(scores, key=lambda s: s[0][0])
        if spec.dim > 1 and spec.refine_steps > 0:
            v2 = _refine(phi, v, p, spec.refine_steps)
            m2, se2 = _objective(phi, v2, p)
            if m2 > m:
                m, se, v = m2, se2, v2
        val, vse = _pth_root(m, se, p)
        per_point[g] = val
        if best is None or val > best[0]:
            best = (val, vse, g, v, int((~alive).sum()))
    val, vse, g, v, excl = best
    est = McEstimate(val, vse, ens.n_paths, excl)
    return KappaResult(est, spec.points[g].copy(), np.asarray(v, dtype=float).copy(), t, p,
                       per_point, spec.is_edge(g) and G > 1)


def _default_spec(model: DriftModel, spec: SupSearchSpec | None) -> SupSearchSpec:
    spec = SupSearchSpec.default(model.dim) if spec is None else spec
    if spec.dim != model.dim:
        raise ValueError(f"grid dimension {spec.dim} does not match model dimension {model.dim}")
    return spec


def estimate_kappa_curve(model: DriftModel, p_list: Sequence[float], times: Sequence[float],
                         spec: SupSearchSpec | None = None, N: int = 1000, dt: float = 1e-3,
                         seed: int = 0, threads: int | None = None,
                         scheme: str = "euler") -> dict[tuple[float, float], KappaResult]:
    """kappa_p(t) for every p in ``p_list`` and t in ``times`` from one ensemble."""
    if N < 100:
        raise ValueError("N must be at least 100")
    spec = _default_spec(model, spec)
    times = sorted(float(t) for t in times)
    if any(t <= 0 for t in times):
        raise ValueError("times must be positive")
    for p in p_list:
        if p < 1:
            raise ValueError("p must be at least 1")
    ens = simulate_ensemble(model, spec.points, times[-1], dt, N, seed,
                            checkpoints=times, tangent=True, threads=threads, scheme=scheme)
    out = {}
    for t in times:
        ci = int(np.argmin(np.abs(ens.times - t)))
        for p in p_list:
            out[(float(p), t)] = _kappa_at(ens, ci, float(p), spec, t)
    return out


def estimate_kappa_p(model: DriftModel, p: float, t: float, spec: SupSearchSpec | None = None,
                     N: int = 1000, dt: float = 1e-3, seed: int = 0,
                     threads: int | None = None) -> KappaResult:
    """Grid supremum of (E|Phi_t v|^p)^{1/p} with its standard error.

    >>> from lpcontract.models import ornstein_uhlenbeck
    >>> r = estimate_kappa_p(ornstein_uhlenbeck(1.0), 2, 1.0, SupSearchSpec.grid_1d(0, 0, 1), N=100)
    >>> round(r.estimate.value, 3)
    0.368
    """
    res = estimate_kappa_curve(model, [p], [t], spec, N, dt, seed, threads)
    return res[(float(p), float(t))]


def estimate_Gp(model: DriftModel, p: float, x, t: float, N: int = 1000, dt: float = 1e-3,
                seed: int = 0, threads: int | None = None, eta=None) -> McEstimate:
    """Sample mean of exp(p int_0^t eta(X_s) ds) started at x.

    Exponentials beyond 1e300 are clamped and counted in ``saturated``.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    ens = simulate_ensemble(model, x, t, dt, N, seed, integral=True, threads=threads, eta=eta)
    alive = ens.alive[0]
    if not alive.any():
        raise RuntimeError("all paths diverged")
    z = p * ens.integral[-1, 0][alive]
    saturated = int(np.count_nonzero(z > LOG_CLAMP))
    samples = np.exp(np.minimum(z, LOG_CLAMP))
    m, se = _mean_se(samples)
    return McEstimate(m, se, int(N), int((~alive).sum()), saturated)


@dataclass(frozen=True)
class LyapunovResult:
    estimate: McEstimate
    times: np.ndarray
    log_kappa: np.ndarray
    log_kappa_se: np.ndarray
    rates: np.ndarray
    inconsistent: bool


def estimate_lyapunov(model: DriftModel, p: float, T: float, spec: SupSearchSpec | None = None,
                      N: int = 1000, dt: float = 1e-3, seed: int = 0, n_checkpoints: int = 11,
                      threads: int | None = None) -> LyapunovResult:
    """Least-squares slope of ln kappa_p(t) over checkpoints spread on [T/2, T].

    The standard error propagates the per-checkpoint Monte Carlo errors
    through the regression weights.  ``inconsistent`` is set, with a
    warning, when the regression residuals exceed three times that error.
    """
    n_steps = int(round(T / dt))
    half = n_steps // 2
    ks = np.unique(np.linspace(half, n_steps, n_checkpoints).round().astype(int))
    ks = ks[ks > 0]
    times = ks * dt
    curve = estimate_kappa_curve(model, [p], list(times), spec, N, dt, seed, threads)
    t_arr = np.array(sorted(t for (_, t) in curve))
    vals = np.array([curve[(float(p), t)].estimate.value for t in t_arr])
    ses = np.array([curve[(float(p), t)].estimate.stderr for t in t_arr])
    if np.any(vals <= 0):
        raise RuntimeError("kappa estimate vanished; cannot take logarithms")
    lk = np.log(vals)
    lse = ses / vals
    tc = t_arr - t_arr.mean()
    w = tc / np.sum(tc * tc)
    slope = float(np.sum(w * lk))
    se = float(np.sqrt(np.sum((w * lse) ** 2)))
    resid = lk - (lk.mean() + slope * tc)
    bad = bool(np.any(np.abs(resid) > 3 * np.maximum(lse, 1e-12)) and len(t_arr) > 2)
    if bad:
        warnings.warn("ln kappa is not linear over [T/2, T]; the exponent may not have converged", RuntimeWarning)
    last = curve[(float(p), float(t_arr[-1]))].estimate
    return LyapunovResult(McEstimate(slope, se, last.n, last.excluded), t_arr, lk, lse, lk / t_arr, bad)


@dataclass(frozen=True)
class InequalityReport:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)


def check_submultiplicativity(model: DriftModel, p: float, t: float, s: float,
                              spec: SupSearchSpec | None = None, N: int = 1000, dt: float = 1e-3,
                              seed: int = 0, threads: int | None = None) -> InequalityReport:
    """kappa(t + s) <= kappa(t) kappa(s) within three combined standard errors."""
    if not (t > 0 and s > 0):
        raise ValueError("t and s must be positive")
    ts = sorted({float(t), float(s), float(t + s)})
    c = estimate_kappa_curve(model, [p], ts, spec, N, dt, seed, threads)
    kt, ks, kts = (c[(float(p), float(u))].estimate for u in (t, s, t + s))
    rhs = kt.value * ks.value
    tol = 3.0 * math.sqrt(kts.stderr**2 + (ks.value * kt.stderr) ** 2 + (kt.value * ks.stderr) ** 2)
    tol += _ROUNDOFF * max(abs(rhs), abs(kts.value))
    return InequalityReport("submultiplicativity", kts.value, rhs, tol, kts.value <= rhs + tol,
                            {"kappa_t": kt, "kappa_s": ks, "kappa_t_plus_s": kts})


def check_monotone_p(model: DriftModel, t: float, p_list: Sequence[float],
                     spec: SupSearchSpec | None = None, N: int = 1000, dt: float = 1e-3,
                     seed: int = 0, threads: int | None = None) -> InequalityReport:
    """kappa_p(t) non-decreasing in p, on common random numbers."""
    p_list = [float(p) for p in p_list]
    if p_list != sorted(p_list):
        raise ValueError("p values must be sorted ascending")
    c = estimate_kappa_curve(model, p_list, [t], spec, N, dt, seed, threads)
    ests = [c[(p, float(t))].estimate for p in p_list]
    ok = True
    worst = 0.0
    for a, b in zip(ests, ests[1:]):
        tol = 3.0 * math.sqrt(a.stderr**2 + b.stderr**2) + _ROUNDOFF * abs(a.value)
        ok &= b.value >= a.value - tol
        worst = max(worst, a.value - b.value)
    return InequalityReport("monotone_p", ests[0].value, ests[-1].value, 0.0, bool(ok),
                            {"p": p_list, "values": [e.value for e in ests],
                             "stderr": [e.stderr for e in ests], "largest_drop": worst})


def check_bakry_emery(model: DriftModel, p: float, t: float, spec: SupSearchSpec | None = None,
                      N: int = 1000, dt: float = 1e-3, seed: int = 0, lambda_star: float | None = None,
                      short_horizon: float = 0.05, threads: int | None = None) -> InequalityReport:
    """kappa_p(t) <= exp(-lambda* t) plus the short-time expansion 1 - lambda* t + O(t^2).

    For the expansion the residual r(tau) = kappa(tau) - (1 - lambda* tau)
    is fitted by a tau + C tau^2 on checkpoints in (0, short_horizon]; the
    linear coefficient must vanish up to three standard errors plus the
    O(dt) bias of the Euler scheme.
    """
    lam = model.lambda_star if lambda_star is None else lambda_star
    if lam is None:
        raise ValueError("the model has no Bakry-Emery rate; pass lambda_star")
    n_short = int(round(short_horizon / dt))
    ks = np.unique(np.linspace(0, n_short, 11).round().astype(int))
    taus = sorted({k * dt for k in ks if k > 0} | {float(t)})
    c = estimate_kappa_curve(model, [p], taus, spec, N, dt, seed, threads)
    main = c[(float(p), float(t))].estimate
    bound = math.exp(-lam * t)
    ok_bound = main.value <= bound + 3.0 * main.stderr + _ROUNDOFF * bound

    tau = np.array([u for u in taus if u <= short_horizon + 1e-12])
    k = np.array([c[(float(p), float(u))].estimate.value for u in tau])
    kse = np.array([c[(float(p), float(u))].estimate.stderr for u in tau])
    r = k - (1.0 - lam * tau)
    X = np.stack([tau, tau**2], axis=1)
    coef, *_ = np.linalg.lstsq(X, r, rcond=None)
    a, C = float(coef[0]), float(coef[1])
    H = np.linalg.pinv(X)
    a_se = float(np.sqrt(np.sum((H[0] * kse) ** 2)))
    slack = dt * (1.0 + lam * lam)
    ok_short = abs(a) <= 3.0 * a_se + slack
    return InequalityReport(
        "bakry_emery", main.value, bound, 3.0 * main.stderr, bool(ok_bound and ok_short),
        {"lambda_star": lam, "bound_ok": bool(ok_bound), "short_time_ok": bool(ok_short),
         "linear_coef": a, "linear_coef_se": a_se, "C": C, "slack": slack,
         "short_times": tau.tolist(), "short_residuals": r.tolist()},
    )
