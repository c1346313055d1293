"""Hybrid reflection/synchronous coupling and its explicit contraction constants.

The difference of the two copies is measured by two distances: a weighted
norm R = M h(|y - y'|^2) + h(|z - z'|^2) and the metric distance
S = ||x - x'||_Q.  A concave f of R and a convex g of S combine into a cost
whose expectation decays at rate lambda_p along the coupling.

Constants are evaluated with mpmath so that quantities such as f'(R_1*),
which routinely fall far below the double-precision range, keep their
magnitude; every constant is also exposed as a plain float.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Sequence

import mpmath
import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.special import erf

from .models import DriftModel, MetricChange, StateDecomposition
from .parallel import ordered_map, resolve_threads
from .rng import AUXILIARY, BLOCK, MAIN, REFLECTION, block_generator, block_ranges
from .sde import _diverged, checkpoint_steps, num_steps

__all__ = [
    "CouplingParams",
    "ContractionConstants",
    "CONSTANT_NAMES",
    "compute_constants",
    "f_eval",
    "f_prime_eval",
    "g_eval",
    "h_eval",
    "h_slope",
    "chi_eval",
    "alpha_eval",
    "beta_eval",
    "CouplingTrace",
    "simulate_coupling",
    "fit_decay",
]

CONSTANT_NAMES = ("M", "rho3", "L4", "S1s", "gamma1", "gamma2", "C0", "Rs", "R1s", "S2s",
                  "eps", "c0", "K1", "K2", "K3", "cstar", "kstar", "Kstar", "Cp", "lambdap")

_PREC_BITS = 113


@dataclass(frozen=True, eq=False)
class CouplingParams:
    rho1: float
    L1: float
    L2: float
    L3: float
    theta: float
    metric: MetricChange
    p: float
    n: int
    xi: float = 1e-3

    def __post_init__(self):
        for name in ("rho1", "L1", "L2", "L3", "theta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if not self.p >= 1:
            raise ValueError("p must be at least 1")
        if not 0 < self.xi <= 1:
            raise ValueError("xi must lie in (0, 1]")
        if not 1 <= self.n < self.metric.Q.shape[0]:
            raise ValueError("n must leave a non-empty z-block")

    @classmethod
    def from_model(cls, model: DriftModel, p: float, xi: float = 1e-3) -> "CouplingParams":
        dec = model.decomposition
        if dec is None or model.metric is None:
            raise ValueError("model carries no block decomposition or metric")
        return cls(dec.rho1, dec.L1, dec.L2, dec.L3, dec.theta, model.metric, float(p), dec.n, xi)

    @classmethod
    def simple(cls, rho1, L1, L2, L3, theta, Q, rho2, S_star, p, n=1, xi=1e-3) -> "CouplingParams":
        return cls(float(rho1), float(L1), float(L2), float(L3), float(theta),
                   MetricChange(np.asarray(Q, dtype=float), float(rho2), float(S_star)), float(p), int(n), xi)


@dataclass(frozen=True)
class ContractionConstants:
    """All constants of the construction; floats plus extended-range originals.

    ``extended`` maps each name to an mpmath number carrying the value
    without underflow; the float fields are those values rounded to double.
    """

    M: float
    rho3: float
    L4: float
    S1s: float
    gamma1: float
    gamma2: float
    C0: float
    Rs: float
    R1s: float
    S2s: float
    eps: float
    c0: float
    K1: float
    K2: float
    K3: float
    cstar: float
    kstar: float
    Kstar: float
    Cp: float
    lambdap: float
    # inputs and intermediates carried for evaluation and audit
    theta: float = 1.0
    p: float = 1.0
    S_star: float = 1.0
    fp_R1s: float = 0.0
    f_R1s: float = 0.0
    Q22: float = 1.0
    variant: str = "derived"
    xi: float = 0.0
    extended: dict = field(default_factory=dict, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in CONSTANT_NAMES}

    def check_invariants(self) -> list[str]:
        """Names of violated structural invariants (empty when all hold)."""
        e = self.extended
        bad = []
        if e["lambdap"] != e["cstar"] or not e["cstar"] > 0:
            bad.append("lambdap = cstar > 0")
        if not e["Cp"] >= 1:
            bad.append("Cp >= 1")
        if not e["eps"] > 0:
            bad.append("eps > 0")
        if not e["S2s"] >= e["S1s"]:
            bad.append("S2s >= S1s")
        if e["M"] != e["extended_M_check"]:
            bad.append("M = 2 L2 / rho1")
        return bad


def _mpf(x) -> mpmath.mpf:
    return mpmath.mpf(x)


def compute_constants(params: CouplingParams, variant: str = "derived", use_full_Q_norm: bool = False,
                      xi: float = 0.0) -> ContractionConstants:
    """Evaluate the constants chain giving C_p and lambda_p.

    ``variant="derived"`` uses f(r) = int_0^r exp(-L4 s^2 / (2 theta^2)) ds,
    which integrates the stated f', and the C^1 form of g beyond S2*.
    ``variant="printed"`` uses the closed-form summary exactly as typeset
    (an exponent linear in s for f and no linear term in g beyond S2*).
    ``use_full_Q_norm`` replaces |Q22| by |Q|.  ``xi > 0`` evaluates the
    regularized (pre-limit) versions of every formula.

    >>> c = compute_constants(CouplingParams.simple(1, 1, 1, 1, 1, np.eye(2), 1, 1, 2))
    >>> c.M, c.rho3 == 3 / 13
    (2.0, True)
    """
    if variant not in ("derived", "printed"):
        raise ValueError("variant must be 'derived' or 'printed'")
    if xi and variant == "printed":
        raise ValueError("the printed summary is the xi = 0 limit only")
    if xi < 0 or xi > 1:
        raise ValueError("xi must lie in [0, 1]")
    with mpmath.workprec(_PREC_BITS):
        P = params
        rho1, L1, L2, L3 = map(_mpf, (P.rho1, P.L1, P.L2, P.L3))
        theta, p = _mpf(P.theta), _mpf(P.p)
        rho2, Sst = _mpf(P.metric.rho2), _mpf(P.metric.S_star)
        X = _mpf(xi)
        th2 = theta * theta
        w = np.linalg.eigvalsh(P.metric.Q)
        normQ = _mpf(float(w[-1]))
        lam_min = _mpf(float(w[0]))
        Q22 = normQ if use_full_Q_norm else _mpf(P.metric.block_norm(P.n))
        a = 1 / mpmath.sqrt(lam_min)  # |Q^{-1/2}|

        M = 2 * L2 / rho1
        rho3 = rho1 / (4 * (1 + rho1 / (4 * (L3 + L1 * M))))
        L4 = (L3 + L1 * M + rho3) / 8
        S1s = Sst + X + 16 * Q22 * th2 / (Sst * rho2)
        gamma1 = min(M, 1) * (2 / lam_min) ** _mpf(-0.5)
        gamma2 = max(1 / M, 1) * mpmath.sqrt(normQ)
        C0 = gamma2 * (M + 1) / 2
        Rs = (Sst - C0 * X) / gamma2
        if not Rs > 0:
            raise ValueError("xi too large: S* - C0 xi must stay positive")
        R1s = S1s / gamma1
        S2s = max(gamma2 * R1s + (C0 + gamma2) * X, S1s)
        fp = mpmath.exp(-L4 * R1s**2 / (2 * th2))
        eps = rho3 * Rs * fp / (16 * Q22 * th2)
        c0 = 8 * Q22 * eps * th2 / Sst

        shape = _Shape(theta=theta, L4=L4, R1s=R1s, fp=fp, S_star=Sst, S2s=S2s, eps=eps, p=p,
                       xi=X, variant=variant)
        f_top = shape.f(R1s + X)
        gp_top = shape.g_prime(S2s + X)
        K1 = 1 + (f_top + shape.g(S2s + X)) / S2s**p + gp_top / S2s ** (p - 1)
        K2 = (f_top + shape.g(2 * (S2s + X + 1))) / S1s
        K3 = 1 + mpmath.sqrt(normQ) * max(1 / M, 1) * shape.g(S1s) / Sst
        cstar = min(p * rho2 / (2**p * K1), c0 / K2, rho3 * fp / (2 * K3))
        gS1 = shape.g(S1s)
        kstar = min(
            (2 * a) ** p * min(1, (2 * S2s) ** (p - 1)),
            gS1 / (2 * (S2s + X)) * min(a, a**p / (2 * S2s + X) ** (p - 1)),
            fp * min(M**p, 1) / max(1, R1s ** (p - 1)),
        )
        Kstar = max(K1 * normQ ** (p / 2), K2 * mpmath.sqrt(normQ), mpmath.sqrt(2) * K3 * max(M, 1))
        Cp = Kstar / kstar if kstar > 0 else mpmath.inf
        ext = dict(M=M, rho3=rho3, L4=L4, S1s=S1s, gamma1=gamma1, gamma2=gamma2, C0=C0, Rs=Rs,
                   R1s=R1s, S2s=S2s, eps=eps, c0=c0, K1=K1, K2=K2, K3=K3, cstar=cstar,
                   kstar=kstar, Kstar=Kstar, Cp=Cp, lambdap=cstar)
        ext["extended_M_check"] = 2 * L2 / rho1
        ext["fp_R1s"] = fp
        ext["f_R1s"] = shape.f(R1s)
        floats = {k: float(ext[k]) for k in CONSTANT_NAMES}
        return ContractionConstants(
            **floats, theta=float(P.theta), p=float(P.p), S_star=float(P.metric.S_star),
            fp_R1s=float(fp), f_R1s=float(ext["f_R1s"]), Q22=float(Q22), variant=variant, xi=float(xi),
            extended=ext,
        )


# ---------------------------------------------------------------------------
# The profile functions.  Scalars are handled with mpmath inside
# compute_constants; the vectorized float versions below serve evaluation
# and simulation.


@dataclass
class _Shape:
    """f and g for given constants, in mpmath arithmetic (scalar)."""

    theta: object
    L4: object
    R1s: object
    fp: object
    S_star: object
    S2s: object
    eps: object
    p: object
    xi: object
    variant: str

    def f(self, r):
        th2 = self.theta**2
        if self.variant == "printed":
            rr = min(r, self.R1s)
            return (2 * th2 / self.L4) * (1 - mpmath.exp(-self.L4 * rr / (2 * th2)))
        rr = min(r, self.R1s)
        base = mpmath.sqrt(mpmath.pi * th2 / (2 * self.L4)) * mpmath.erf(rr * mpmath.sqrt(self.L4 / (2 * th2)))
        if r <= self.R1s or self.xi == 0:
            return base
        band = _f_band_integral(float(self.theta), float(self.L4), float(self.R1s), float(self.xi),
                                float(min(r, self.R1s + self.xi)))
        return base + self.fp * band

    def g(self, s):
        return _g_scalar(s, self.S_star, self.S2s, self.eps, self.p, self.xi, self.variant, mpmath)

    def g_prime(self, s):
        return _g_prime_scalar(s, self.S_star, self.S2s, self.eps, self.p, self.xi, self.variant)


def _g_top_curvature(p) -> float:
    return 2 if p == 2 else 0


def _g_scalar(s, Sst, S2s, eps, p, xi, variant, lib=math):
    if s <= Sst:
        return 0 * eps
    if xi == 0:
        if s <= S2s:
            return eps / 2 * (s - Sst) ** 2
        top = eps / 2 * (S2s - Sst) ** 2
        if variant == "printed":
            return (s - S2s) ** p + top
        return top + eps * (S2s - Sst) * (s - S2s) + (s - S2s) ** p
    g1, gp1 = eps * xi**2 / 6, eps * xi / 2
    if s <= Sst + xi:
        return eps * (s - Sst) ** 3 / (6 * xi)
    if s <= S2s:
        u = s - Sst - xi
        return g1 + gp1 * u + eps * u * u / 2
    u0 = S2s - Sst - xi
    g2, gp2 = g1 + gp1 * u0 + eps * u0 * u0 / 2, gp1 + eps * u0
    T = _g_top_curvature(p)
    if s <= S2s + xi:
        u = (s - S2s) / xi
        return g2 + gp2 * xi * u + xi**2 * (eps * u * u / 2 + (T - eps) * u**3 / 6)
    g3 = g2 + gp2 * xi + xi**2 * (eps / 2 + (T - eps) / 6)
    gp3 = gp2 + xi * (eps + (T - eps) / 2)
    v = s - S2s - xi
    return g3 + gp3 * v + v**p


def _g_prime_scalar(s, Sst, S2s, eps, p, xi, variant):
    if s <= Sst:
        return 0 * eps
    if xi == 0:
        if s <= S2s:
            return eps * (s - Sst)
        if variant == "printed":
            return p * (s - S2s) ** (p - 1)
        return eps * (S2s - Sst) + p * (s - S2s) ** (p - 1)
    gp1 = eps * xi / 2
    if s <= Sst + xi:
        return eps * (s - Sst) ** 2 / (2 * xi)
    if s <= S2s:
        return gp1 + eps * (s - Sst - xi)
    gp2 = gp1 + eps * (S2s - Sst - xi)
    T = _g_top_curvature(p)
    if s <= S2s + xi:
        u = (s - S2s) / xi
        return gp2 + xi * (eps * u + (T - eps) * u * u / 2)
    gp3 = gp2 + xi * (eps + (T - eps) / 2)
    return gp3 + p * (s - S2s - xi) ** (p - 1)


# -- smooth switches ----------------------------------------------------------


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _smoothstep_integral(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 - 0.5 * t**4


def _smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (t * (6.0 * t - 15.0) + 10.0)


def _h_profile(xi: float):
    a = xi * xi / 4.0
    c = xi / 2.0
    w = min(xi * xi, (c - a) / 4.0)
    top = (c - 0.5 * w) / (c - a - w)
    return a, c, w, top


def h_slope(x, xi: float):
    """d/dx h(x^2) = 2 x h'(x^2), a C^1 profile with values in [0, 1 + 4 xi]."""
    a, c, w, top = _h_profile(xi)
    x = np.asarray(x, dtype=float)
    up = top * _smoothstep((x - a) / w)
    down = top + (1.0 - top) * _smoothstep((x - (c - w)) / w)
    return np.where(x <= a, 0.0, np.where(x < a + w, up, np.where(x < c - w, top, np.where(x < c, down, 1.0))))


def h_eval(x, xi: float):
    """h(x^2) as a function of x >= 0: zero below xi^2/4, equal to x above xi/2, C^2 in between."""
    a, c, w, top = _h_profile(xi)
    x = np.asarray(x, dtype=float)
    out = np.array(x, dtype=float)
    near = x < c
    if not near.any():
        return out
    xs = x[near]
    ramp_up = top * w * _smoothstep_integral((xs - a) / w)
    H1 = top * w / 2.0
    plateau = H1 + top * (xs - a - w)
    H2 = H1 + top * (c - a - 2.0 * w)
    tt = (xs - (c - w)) / w
    down = H2 + w * (top * tt + (1.0 - top) * _smoothstep_integral(tt))
    out[near] = np.where(xs <= a, 0.0, np.where(xs < a + w, ramp_up, np.where(xs < c - w, plateau, down)))
    return out


def chi_eval(r, xi: float):
    """chi(r^2) as a function of r: 0 below xi/2, 1 above xi, quintic smootherstep between."""
    r = np.asarray(r, dtype=float)
    return _smootherstep((r - 0.5 * xi) / (0.5 * xi))


def _alpha_band_coeffs(theta: float, xi: float):
    # Quintic Hermite on [0, xi/2] (shifted so R1* sits at 0): value, first and
    # second derivative matched at both ends.
    h = 0.5 * xi
    y0, d0, s0 = theta, 0.0, 0.0
    y1, d1, s1 = theta * xi * xi / 4.0, -theta * xi, 2.0 * theta
    return h, (y0, d0, s0, y1, d1, s1)


def _quintic_hermite(t, h, c):
    y0, d0, s0, y1, d1, s1 = c
    t2, t3, t4, t5 = t * t, t**3, t**4, t**5
    H0 = 1 - 10 * t3 + 15 * t4 - 6 * t5
    H1 = t - 6 * t3 + 8 * t4 - 3 * t5
    H2 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5
    H3 = 10 * t3 - 15 * t4 + 6 * t5
    H4 = -4 * t3 + 7 * t4 - 3 * t5
    H5 = 0.5 * t3 - t4 + 0.5 * t5
    return y0 * H0 + h * d0 * H1 + h * h * s0 * H2 + y1 * H3 + h * d1 * H4 + h * h * s1 * H5


def _alpha_local(u, theta: float, xi: float):
    # alpha(R1* + u) for u >= 0
    h, c = _alpha_band_coeffs(theta, xi)
    band = _quintic_hermite(np.clip(u / h, 0.0, 1.0), h, c)
    return np.where(u < h, band, np.where(u < xi, theta * (u - xi) ** 2, 0.0))


def alpha_eval(r, theta: float, R1s: float, xi: float):
    """Noise switch: theta up to R1*, a C^2 taper on [R1*, R1* + xi], zero beyond."""
    r = np.asarray(r, dtype=float)
    out = np.full(r.shape, float(theta))
    far = r > R1s
    if far.any():
        out[far] = _alpha_local(r[far] - R1s, theta, xi)
    return out


def _alpha_integral(theta, R1s, xi, u):
    """int over [R1*, R1* + u] of s / alpha(s)^2 ds, for 0 <= u < xi."""
    h = 0.5 * xi
    val = 0.0
    if u > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IntegrationWarning)
            val, _ = quad(lambda v: (R1s + v) / float(_alpha_local(v, theta, xi)) ** 2, 0.0, min(u, h),
                          epsabs=0.0, epsrel=1e-10, limit=200)
    if u > h:
        # alpha = theta w^2 with w = u - xi; the antiderivative is explicit
        def anti(v):
            w = v - xi
            return (-1.0 / (2.0 * w * w) - (R1s + xi) / (3.0 * w**3)) / theta**2

        val += anti(u) - anti(h)
    return val


def _f_band_integral(theta, L4, R1s, xi, r):
    """int_{R1*}^{r} f'(s) / f'(R1*) ds on the taper band."""
    if r <= R1s:
        return 0.0
    end = min(r - R1s, xi)

    def integrand(u):
        if u >= xi:
            return 0.0
        e = L4 * _alpha_integral(theta, R1s, xi, u)
        return math.exp(-e) if e < 745 else 0.0

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        val, _ = quad(integrand, 0.0, end, epsabs=0.0, epsrel=1e-9, limit=200)
    return val


def f_prime_eval(r, c: ContractionConstants, xi: float = 0.0):
    """f'(r): exp(-L4 r^2 / (2 theta^2)) up to R1*, then the taper (or zero when xi = 0)."""
    r = np.asarray(r, dtype=float)
    th2 = c.theta**2
    if c.variant == "printed":
        inner = np.exp(-c.L4 * r / (2 * th2))
    else:
        inner = np.exp(-c.L4 * r * r / (2 * th2))
    out = np.where(r <= c.R1s, inner, 0.0)
    if xi > 0:
        band = (r > c.R1s) & (r < c.R1s + xi)
        for i in zip(*np.nonzero(band)):
            e = c.L4 * _alpha_integral(c.theta, c.R1s, xi, float(r[i]) - c.R1s)
            out[i] = c.fp_R1s * (math.exp(-e) if e < 745 else 0.0)
    return out


def f_eval(r, c: ContractionConstants, xi: float = 0.0):
    """Concave distance profile: f(0) = 0, f'(0) = 1, constant beyond the noise cut-off."""
    r = np.asarray(r, dtype=float)
    th2 = c.theta**2
    rr = np.minimum(r, c.R1s)
    if c.variant == "printed":
        base = (2 * th2 / c.L4) * (1 - np.exp(-c.L4 * rr / (2 * th2)))
    else:
        base = math.sqrt(math.pi * th2 / (2 * c.L4)) * erf(rr * math.sqrt(c.L4 / (2 * th2)))
    if xi > 0 and c.fp_R1s > 0:
        base = np.array(base, dtype=float)
        beyond = r > c.R1s
        cache: dict[float, float] = {}
        for i in zip(*np.nonzero(beyond)):
            ri = float(min(r[i], c.R1s + xi))
            if ri not in cache:
                cache[ri] = c.fp_R1s * _f_band_integral(c.theta, c.L4, c.R1s, xi, ri)
            base[i] += cache[ri]
    return base


def g_eval(s, c: ContractionConstants, xi: float = 0.0):
    """Convex far-field profile: zero up to S*, quadratic, then p-th power growth."""
    s = np.asarray(s, dtype=float)
    Sst, S2s, eps, p = c.S_star, c.S2s, c.eps, c.p
    if xi == 0:
        quad_part = 0.5 * eps * (s - Sst) ** 2
        top = 0.5 * eps * (S2s - Sst) ** 2
        v = np.maximum(s - S2s, 0.0)
        if c.variant == "printed":
            far = v**p + top
        else:
            far = top + eps * (S2s - Sst) * v + v**p
        return np.where(s <= Sst, 0.0, np.where(s <= S2s, quad_part, far))
    # the regularized branches, evaluated on clipped arguments
    g1, gp1 = eps * xi**2 / 6, eps * xi / 2
    u0 = S2s - Sst - xi
    g2, gp2 = g1 + gp1 * u0 + eps * u0 * u0 / 2, gp1 + eps * u0
    T = _g_top_curvature(p)
    g3 = g2 + gp2 * xi + xi**2 * (eps / 2 + (T - eps) / 6)
    gp3 = gp2 + xi * (eps + (T - eps) / 2)
    a = np.clip(s - Sst, 0.0, xi)
    ramp = eps * a**3 / (6 * xi)
    u = np.clip(s - Sst - xi, 0.0, None)
    middle = g1 + gp1 * u + eps * u * u / 2
    t = np.clip((s - S2s) / xi, 0.0, 1.0)
    blend = g2 + gp2 * xi * t + xi**2 * (eps * t * t / 2 + (T - eps) * t**3 / 6)
    v = np.maximum(s - S2s - xi, 0.0)
    far = g3 + gp3 * v + v**p
    return np.where(s <= Sst, 0.0, np.where(s <= Sst + xi, ramp,
                    np.where(s <= S2s, middle, np.where(s <= S2s + xi, blend, far))))


def beta_eval(x, xp, c: ContractionConstants, n: int, xi: float):
    """beta(x, x') = chi(|z - z'|^2) alpha(M h(|y - y'|^2) + h(|z - z'|^2))."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    dy = np.linalg.norm(x[..., :n] - xp[..., :n], axis=-1)
    dz = np.linalg.norm(x[..., n:] - xp[..., n:], axis=-1)
    R = c.M * h_eval(dy, xi) + h_eval(dz, xi)
    return chi_eval(dz, xi) * alpha_eval(R, c.theta, c.R1s, xi)


# ---------------------------------------------------------------------------
# Simulation


@dataclass(frozen=True)
class CouplingTrace:
    times: np.ndarray
    mean_f_R: np.ndarray
    mean_g_S: np.ndarray
    mean_omega: np.ndarray
    se_f_R: np.ndarray
    se_g_S: np.ndarray
    se_omega: np.ndarray
    se_cost: np.ndarray
    n: int
    excluded: int
    fallback_steps: int
    orthogonality_error: float
    constants: ContractionConstants = field(repr=False)
    xi: float = 1e-3

    @property
    def mean_cost(self) -> np.ndarray:
        return self.mean_f_R + self.mean_g_S


def _sigma_tilde(model: DriftModel, dec: StateDecomposition) -> np.ndarray | None:
    Sig = model.sigma @ model.sigma.T
    Sig[dec.n :, dec.n :] -= dec.theta**2 * np.eye(dec.m)
    Sig = 0.5 * (Sig + Sig.T)
    w, U = np.linalg.eigh(Sig)
    if w[0] < -1e-10 * max(1.0, float(np.abs(Sig).max())):
        raise ValueError("sigma sigma^T - theta^2 blockdiag(0, I) is not positive semidefinite")
    if np.all(np.abs(w) <= 1e-14):
        return None
    return U * np.sqrt(np.clip(w, 0.0, None))


def _coupling_model(model: DriftModel):
    if model.kind == "colored_noise" and model.base is not None:
        return model.base, model.change.forward
    return model, lambda x: np.asarray(x, dtype=float)


def simulate_coupling(model: DriftModel, x0, x0p, T: float, dt: float, N: int, seed: int, *,
                      p: float = 2.0, xi: float = 1e-3, checkpoints: Sequence[float] | None = None,
                      constants: ContractionConstants | None = None, force_synchronous: bool = False,
                      threads: int | None = None, return_paths: bool = False):
    """Simulate N coupled pairs and record E f(R_t), E g(S_t) and E omega at checkpoints.

    Start points are given in the model's own coordinates; colored-noise
    models are simulated in their (y, z) coordinates.  With
    ``force_synchronous`` the reflection switch is held at zero, which
    reduces the scheme to synchronous coupling with the same main stream
    as :func:`lpcontract.sde.simulate_ensemble`.
    """
    sim, to_sim = _coupling_model(model)
    dec = sim.decomposition
    if dec is None or sim.metric is None:
        raise ValueError("coupling needs a model with a block decomposition and a metric")
    params = CouplingParams.from_model(sim, p, xi)
    c = compute_constants(params) if constants is None else constants
    n, m, d = dec.n, dec.m, dec.dim
    theta = dec.theta
    th2 = theta * theta
    sig_t = _sigma_tilde(sim, dec)
    x0 = to_sim(np.asarray(x0, dtype=float).reshape(d))
    x0p = to_sim(np.asarray(x0p, dtype=float).reshape(d))
    nsteps = num_steps(T, dt)
    if checkpoints is None:
        checkpoints = [T * k / 40 for k in range(41)]
        ck = np.unique(np.round(np.array(checkpoints) / dt).astype(int))
    else:
        ck = checkpoint_steps(checkpoints, T, dt)
    sq = math.sqrt(dt)
    metric = sim.metric
    Mc, R1s = c.M, c.R1s

    def run(group):
        # A group of consecutive blocks is advanced as one array; every pair
        # still draws from its own block's streams, so grouping is invisible
        # in the output.
        sizes = [stop - start for _, start, stop in group]
        nb = sum(sizes)
        g_main = [block_generator(seed, k, MAIN) for k, _, _ in group]
        g_refl = [block_generator(seed, k, REFLECTION) for k, _, _ in group]
        g_aux = [block_generator(seed, k, AUXILIARY) for k, _, _ in group] if sig_t is not None else None

        def draw(gens, width):
            return np.concatenate([g.standard_normal((BLOCK, width))[:sz] for g, sz in zip(gens, sizes)])

        X = np.repeat(x0[None, :], nb, axis=0)
        Xp = np.repeat(x0p[None, :], nb, axis=0)
        dead = np.zeros(nb, dtype=bool)
        fallback = 0
        orth = 0.0
        snaps = []
        ci = 0
        if ck[0] == 0:
            snaps.append((X.copy(), Xp.copy()))
            ci = 1
        e_default = np.zeros(m)
        e_default[0] = 1.0
        eye_m = np.eye(m)
        inc = np.zeros((2 * nb, d))
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(1, nsteps + 1):
                xi_main = draw(g_main, m)
                xi_refl = draw(g_refl, m)
                sP = sq * xi_main
                comp_sP = theta * sP
                inc[:nb, n:] = comp_sP
                inc[nb:, n:] = comp_sP
                dZ = X[:, n:] - Xp[:, n:]
                dz = np.sqrt(np.einsum("ij,ij->i", dZ, dZ))
                zero = dz == 0.0
                fallback += int(np.count_nonzero(zero & ~dead))
                if not force_synchronous:
                    dY = X[:, :n] - Xp[:, :n]
                    dy = np.sqrt(np.einsum("ij,ij->i", dY, dY))
                    R = Mc * h_eval(dy, xi) + h_eval(dz, xi)
                    beta = chi_eval(dz, xi) * alpha_eval(R, theta, R1s, xi)
                    # Pairs with beta = 0 move synchronously; only the rest
                    # need the reflection, and only they are checked.
                    act = np.flatnonzero((beta > 0.0) & ~dead)
                    if act.size:
                        b = beta[act]
                        za = zero[act]
                        e = np.where(za[:, None], e_default,
                                     dZ[act] / np.where(za, 1.0, dz[act])[:, None])
                        refl = eye_m - 2.0 * e[:, :, None] * e[:, None, :]
                        b2 = (b * b)[:, None, None]
                        # Step-1 orthogonality identity, on the matrices actually used
                        ident = b2 * np.matmul(refl, refl) + (th2 - b2) * eye_m
                        orth = max(orth, float(np.abs(ident - th2 * eye_m).max()))
                        comp = np.sqrt(th2 - b * b)[:, None]
                        sB = sq * xi_refl[act]
                        sPa = sP[act]
                        inc[act, n:] = b[:, None] * sB + comp * sPa
                        inc[nb + act, n:] = b[:, None] * np.matmul(refl, sB[:, :, None])[:, :, 0] + comp * sPa
                if sig_t is not None:
                    shared = (sq * draw(g_aux, sig_t.shape[1])) @ sig_t.T
                    inc[:nb] += shared
                    inc[nb:] += shared
                both = np.concatenate([X, Xp])
                Xb = both + sim.drift(both) * dt + inc
                Xn, Xpn = Xb[:nb], Xb[nb:]
                # written so that NaN also counts as divergent
                bad = _diverged(Xn) | _diverged(Xpn)
                if bad.any():
                    dead |= bad
                    Xn[dead] = 0.0
                    Xpn[dead] = 0.0
                X, Xp = Xn, Xpn
                if ci < len(ck) and step == ck[ci]:
                    snaps.append((X.copy(), Xp.copy()))
                    ci += 1
        return dead, snaps, fallback, orth

    blocks = list(block_ranges(int(N)))
    n_groups = min(resolve_threads(threads), len(blocks))
    groups = [list(g) for g in np.array_split(np.arange(len(blocks)), n_groups)]
    parts = ordered_map(run, [[blocks[i] for i in g] for g in groups], n_groups)
    dead = np.concatenate([pt[0] for pt in parts])
    alive = ~dead
    fallback = sum(pt[2] for pt in parts)
    orth = max(pt[3] for pt in parts)
    nck = len(ck)
    stats = {k: np.empty(nck) for k in ("f", "g", "w", "sf", "sg", "sw", "sc")}
    paths = []
    for j in range(nck):
        X = np.concatenate([pt[1][j][0] for pt in parts])[alive]
        Xp = np.concatenate([pt[1][j][1] for pt in parts])[alive]
        if return_paths:
            paths.append((X, Xp))
        D = X - Xp
        dy = np.linalg.norm(D[:, :n], axis=1)
        dz = np.linalg.norm(D[:, n:], axis=1)
        R = Mc * h_eval(dy, xi) + h_eval(dz, xi)
        S = metric.qnorm(D)
        nrm = np.linalg.norm(D, axis=1)
        fv = f_eval(R, c, xi)
        gv = g_eval(S, c, xi)
        wv = np.maximum(nrm, nrm**p)
        cnt = max(1, fv.size)
        for key, vals in (("f", fv), ("g", gv), ("w", wv)):
            stats[key][j] = float(vals.mean()) if vals.size else float("nan")
        for key, vals in (("sf", fv), ("sg", gv), ("sw", wv), ("sc", fv + gv)):
            stats[key][j] = float(vals.std(ddof=1) / math.sqrt(cnt)) if vals.size > 1 else float("nan")
    trace = CouplingTrace(
        times=ck * dt, mean_f_R=stats["f"], mean_g_S=stats["g"], mean_omega=stats["w"],
        se_f_R=stats["sf"], se_g_S=stats["sg"], se_omega=stats["sw"], se_cost=stats["sc"],
        n=int(N), excluded=int(dead.sum()), fallback_steps=int(fallback), orthogonality_error=orth,
        constants=c, xi=xi,
    )
    return (trace, paths) if return_paths else trace


@dataclass(frozen=True)
class DecayFit:
    rate: float
    stderr: float
    times: np.ndarray
    extinct: bool


def fit_decay(trace: CouplingTrace, t_from: float | None = None) -> DecayFit:
    """Least-squares decay rate of E[f(R) + g(S)] over checkpoints in [t_from, T].

    Only checkpoints with a positive mean enter the fit.  If the mean cost
    has reached exactly zero the pairs have all merged; the fit is then
    marked ``extinct`` and the rate is infinite.
    """
    t = trace.times
    T = float(t[-1])
    t_from = T / 2 if t_from is None else t_from
    cost = trace.mean_cost
    se = trace.se_cost
    sel = (t >= t_from - 1e-12) & (cost > 0)
    if np.any((t >= t_from - 1e-12) & (cost == 0)):
        return DecayFit(float("inf"), 0.0, t[sel], True)
    if sel.sum() < 2:
        raise ValueError("fewer than two usable checkpoints for the decay fit")
    ts = t[sel]
    y = np.log(cost[sel])
    ys = se[sel] / cost[sel]
    tc = ts - ts.mean()
    w = tc / np.sum(tc * tc)
    slope = float(np.sum(w * y))
    resid = y - (y.mean() + slope * tc)
    dof = max(1, ts.size - 2)
    se_reg = math.sqrt(float(np.sum(resid**2)) / dof / float(np.sum(tc * tc)))
    se_mc = float(np.sqrt(np.sum((w * ys) ** 2)))
    return DecayFit(-slope, max(se_reg, se_mc), ts, False)
