"""Closed-form contraction certificates.

Each function is plain arithmetic on its inputs; they are safe to call from
any thread and never touch random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import mpmath
import numpy as np

__all__ = [
    "RhoPrimeCertificate",
    "certify_rho_prime",
    "MassBound",
    "elliptic_mass_bound",
    "KineticMatrix",
    "kinetic_matrix",
    "kinetic_kappa_inf_rate",
    "EtaBar",
    "eta_bar_construct",
]


@dataclass(frozen=True)
class RhoPrimeCertificate:
    A: float
    rho_prime: float
    contracts: bool
    rate: float | None
    A_extended: mpmath.mpf | None = None
    rho_prime_extended: mpmath.mpf | None = None


def certify_rho_prime(p: float, mu_eta: float, L_eta: float, C1, lambda1,
                      sigma_norm: float, R: float, mu_abs_moment: float,
                      rho: float | None = None) -> RhoPrimeCertificate:
    """Prefactor A and rate rho' for the Feynman-Kac moment bound.

    ``mu_eta`` is the stationary mean of eta and ``mu_abs_moment`` the
    stationary first absolute moment.  If ``rho`` (the far-field contraction
    rate) is supplied, ``rate`` is min(rho, rho') when both are positive.
    ``C1`` and ``lambda1`` may be mpmath numbers beyond the float range; the
    arithmetic is carried out in extended precision and the float fields
    saturate to 0 or infinity where needed.

    >>> certify_rho_prime(2, -1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0).rho_prime
    2.0
    """
    if not (C1 > 0 and lambda1 > 0):
        raise ValueError("C1 and lambda1 must be positive")
    if L_eta < 0:
        raise ValueError("L_eta must be non-negative")
    with mpmath.workprec(113):
        ratio = mpmath.mpf(C1) / mpmath.mpf(lambda1)
        A = mpmath.exp(p * L_eta * ratio * (R + mu_abs_moment))
        rho_prime = -p * mpmath.mpf(mu_eta) - sigma_norm**2 * p**2 * L_eta**2 * ratio**2
    rp = float(rho_prime)
    contracts = rho_prime > 0 and (rho is None or rho > 0)
    rate = None
    if contracts:
        rate = rp if rho is None else min(rho, rp)
    return RhoPrimeCertificate(float(A), rp, bool(contracts), rate, A, rho_prime)


@dataclass(frozen=True)
class MassBound:
    C: float
    eps: float
    q_bar: float


def elliptic_mass_bound(K: float, R: float, R2: float, theta: float, d: float) -> MassBound:
    """Constants bounding the stationary mass near the origin for an elliptic diffusion.

    >>> mb = elliptic_mass_bound(1, 1, 2, 1, 2)
    >>> mb.eps, round(mb.C, 3)
    (1.0, 12.685)
    """
    if not R2 > R > 0:
        raise ValueError("need R2 > R > 0")
    if not (K > 0 and theta > 0 and d > 0):
        raise ValueError("K, theta and d must be positive")
    th2 = theta * theta
    C = (K + th2 / (2.0 * (R2 * R2 - R * R))) * R2 * R2 * math.exp(K * R * R / th2)
    eps = th2 * d / 2.0
    return MassBound(C, eps, eps / (C + eps))


@dataclass(frozen=True)
class KineticMatrix:
    a: float
    c: float
    rho: float
    matrix: np.ndarray


def kinetic_matrix(ell: float, Lam: float, gamma: float, d: int = 1) -> KineticMatrix | None:
    """Metric for kinetic Langevin with ell <= V'' <= Lam, when gamma^2 >= 4 Lam.

    Returns ``None`` in the low-friction regime, which needs the general
    construction and is not handled here.
    """
    if not Lam >= ell > 0:
        raise ValueError("need Lam >= ell > 0")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if gamma * gamma < 4.0 * Lam:
        return None
    a, c = 1.0 / Lam, 1.0 / gamma
    if not a > c * c:
        raise ArithmeticError("metric is not positive definite")
    I = np.eye(d)
    M = np.block([[I, c * I], [c * I, a * I]])
    return KineticMatrix(a, c, ell / (3.0 * gamma), M)


def kinetic_kappa_inf_rate(gamma: float, xi0: float) -> float:
    """Long-time exponential rate of kappa_p for kinetic Langevin with V'' >= xi0.

    >>> kinetic_kappa_inf_rate(2.0, -3.0)
    1.0
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if xi0 < gamma * gamma / 4.0:
        return math.sqrt(gamma * gamma / 4.0 - xi0) - gamma / 2.0
    return -gamma / 2.0


@dataclass(frozen=True)
class EtaBar:
    delta: float
    q: float
    S: float
    S2: float
    Q_inv_sqrt: np.ndarray
    lipschitz: float
    continuous: bool = True

    def of_norm(self, u):
        """Value as a function of u = |Q^{-1/2} y|."""
        u = np.asarray(u, dtype=float)
        low = -self.delta / self.q
        if self.continuous:
            mid = self.delta * (1.0 - (1.0 + 1.0 / self.q) * (u - self.S) / (self.S2 - self.S))
        else:
            mid = self.delta * (1.0 + (1.0 - (1.0 - 1.0 / self.q) / (self.S2 - self.S)) * (u - self.S))
        return np.where(u <= self.S, self.delta, np.where(u >= self.S2, low, mid))

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return self.of_norm(np.linalg.norm(y @ self.Q_inv_sqrt.T, axis=-1))


def eta_bar_construct(delta: float, q: float, S: float, S2: float, Q=None, continuous: bool = True) -> EtaBar:
    """Three-piece curvature profile: delta inside, -delta/q outside, linear in between.

    The middle branch interpolates linearly so that the profile is Lipschitz
    with constant delta (1 + 1/q) / (S2 - S) in |Q^{-1/2} y|.  With
    ``continuous=False`` the middle branch is
    delta [1 + (1 - (1 - 1/q) / (S2 - S)) (u - S)], which in general jumps
    at u = S2, so ``lipschitz`` is reported as infinite.
    """
    if not S2 > S > 0:
        raise ValueError("need S2 > S > 0")
    if not (delta > 0 and q > 0):
        raise ValueError("delta and q must be positive")
    if Q is None:
        Qis = np.eye(1)
    else:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        w, U = np.linalg.eigh(0.5 * (Q + Q.T))
        if w[0] <= 0:
            raise ValueError("Q must be positive definite")
        Qis = (U / np.sqrt(w)) @ U.T
    lip = delta * (1.0 + 1.0 / q) / (S2 - S) if continuous else math.inf
    return EtaBar(delta, q, S, S2, Qis, lip, continuous)
