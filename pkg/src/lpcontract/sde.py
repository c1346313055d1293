"""Euler-Maruyama integration of the state, its tangent flow and the running curvature integral."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .models import DriftModel
from .parallel import ordered_map
from .rng import BLOCK, MAIN, RngStream, block_generator, block_ranges

__all__ = [
    "DIVERGENCE_BOUND",
    "PathState",
    "TangentPath",
    "Ensemble",
    "em_step",
    "integrate_pair",
    "integrate_tangent",
    "simulate_ensemble",
    "noise_increment",
    "num_steps",
    "checkpoint_steps",
]

DIVERGENCE_BOUND = 1e8
SCHEMES = ("euler", "exponential")


def num_steps(T: float, dt: float) -> int:
    """Number of steps of size dt covering [0, T]; T must be a multiple of dt."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a whole number of steps of dt={dt}")
    return n


def checkpoint_steps(times: Sequence[float] | None, T: float, dt: float) -> np.ndarray:
    n = num_steps(T, dt)
    steps = {n}
    for t in (() if times is None else np.asarray(times, dtype=float).ravel()):
        if t == 0:
            steps.add(0)
        else:
            k = num_steps(t, dt)
            if k > n:
                raise ValueError(f"checkpoint {t} lies beyond T={T}")
            steps.add(k)
    return np.array(sorted(steps), dtype=int)


def noise_increment(sigma: np.ndarray, xi: np.ndarray, sqdt: float) -> np.ndarray:
    """sigma @ (sqrt(dt) xi), accumulated column by column.

    The explicit order makes the result reproducible by other code paths
    that build the same increment from per-column coefficients.
    """
    k = sigma.shape[1]
    inc = None
    for j in range(k):
        term = (sqdt * xi[..., j])[..., None] * sigma[:, j]
        inc = term if inc is None else inc + term
    return inc


def _diverged(x: np.ndarray) -> np.ndarray:
    # A single reduction over the whole array is far cheaper than a per-row
    # one when the trailing axis is short, and almost every step is clean.
    with np.errstate(invalid="ignore"):
        if x.size and np.abs(x).max() <= DIVERGENCE_BOUND:
            return np.zeros(x.shape[:-1], dtype=bool)
        return ~np.isfinite(x).all(axis=-1) | (np.abs(x).max(axis=-1) > DIVERGENCE_BOUND)


@dataclass(frozen=True)
class PathState:
    """A single trajectory snapshot.

    ``V`` is either a tangent vector of shape (d,) or a tangent matrix of
    shape (d, d); ``I`` is the running integral of eta, if tracked.
    """

    t: float
    x: np.ndarray
    V: np.ndarray | None = None
    I: float | None = None
    divergent: bool = False

    @classmethod
    def start(cls, x0, tangent: str | np.ndarray | None = None, integral: bool = False) -> "PathState":
        x0 = np.array(x0, dtype=float).reshape(-1)
        if isinstance(tangent, str):
            if tangent != "matrix":
                raise ValueError("tangent must be a vector, 'matrix' or None")
            V = np.eye(x0.size)
        elif tangent is None:
            V = None
        else:
            V = np.array(tangent, dtype=float).reshape(-1)
            if V.size != x0.size:
                raise ValueError("tangent vector has the wrong dimension")
        return cls(0.0, x0, V, 0.0 if integral else None)


def em_step(model: DriftModel, s: PathState, dt: float, rng: RngStream | None = None,
            scheme: str = "euler") -> PathState:
    """One Euler-Maruyama step; ``rng=None`` means a zero-noise step.

    >>> from lpcontract.models import ornstein_uhlenbeck
    >>> s = em_step(ornstein_uhlenbeck(1.0), PathState.start([1.0], [1.0]), 0.01)
    >>> float(s.x[0]), float(s.V[0])
    (0.99, 0.99)
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown tangent scheme {scheme!r}")
    if s.divergent:
        return replace(s, t=s.t + dt)
    x = s.x
    b = model.drift(x)
    if rng is None:
        inc = np.zeros_like(x)
    else:
        inc = noise_increment(model.sigma, rng.normal(model.noise_dim), np.sqrt(dt))
    x_new = x + b * dt + inc
    if _diverged(x_new):
        return PathState(s.t + dt, x_new, s.V, s.I, True)
    V = s.V
    if V is not None:
        if scheme == "exponential":
            if model.dim != 1:
                raise ValueError("the exponential tangent scheme is one-dimensional")
            g = 0.5 * dt * (model.jacobian(x)[0, 0] + model.jacobian(x_new)[0, 0])
            V = V * np.exp(g)
        else:
            V = V + dt * (model.jacobian(x) @ V)
    I = s.I
    if I is not None:
        I = I + 0.5 * dt * (float(model.eta(x)) + float(model.eta(x_new)))
    return PathState(s.t + dt, x_new, V, I, False)


def integrate_pair(model: DriftModel, x0, y0, T: float, dt: float,
                   rng: RngStream | None = None) -> tuple[PathState, PathState]:
    """Synchronous coupling: both copies consume the same draw at every step."""
    n = num_steps(T, dt)
    sq = np.sqrt(dt)
    X = PathState.start(x0)
    Y = PathState.start(y0)
    x, y = X.x, Y.x
    bad_x = bad_y = False
    for _ in range(n):
        inc = 0.0 if rng is None else noise_increment(model.sigma, rng.normal(model.noise_dim), sq)
        if not bad_x:
            x = x + model.drift(x) * dt + inc
            bad_x = bool(_diverged(x))
        if not bad_y:
            y = y + model.drift(y) * dt + inc
            bad_y = bool(_diverged(y))
    return PathState(n * dt, x, divergent=bad_x), PathState(n * dt, y, divergent=bad_y)


class TangentPath(NamedTuple):
    x: np.ndarray
    V: np.ndarray
    I: float
    divergent: bool


def integrate_tangent(model: DriftModel, x0, v0, T: float, dt: float,
                      rng: RngStream | None = None, scheme: str = "euler") -> TangentPath:
    """Terminal state, tangent vector and curvature integral along one path."""
    v0 = np.array(v0, dtype=float).reshape(-1)
    if abs(np.linalg.norm(v0) - 1.0) > 1e-12:
        raise ValueError("v0 must be a unit vector")
    s = PathState.start(x0, v0, integral=True)
    for _ in range(num_steps(T, dt)):
        s = em_step(model, s, dt, rng, scheme)
        if s.divergent:
            break
    return TangentPath(s.x, s.V, float(s.I), s.divergent)


@dataclass(frozen=True)
class Ensemble:
    """Checkpointed output of :func:`simulate_ensemble`.

    Arrays are indexed (checkpoint, start point, trajectory, ...).  A path
    that ever diverged is marked dead in ``alive`` and must be ignored.
    """

    times: np.ndarray
    alive: np.ndarray
    x: np.ndarray | None = None
    phi: np.ndarray | None = None
    integral: np.ndarray | None = None

    @property
    def excluded(self) -> np.ndarray:
        return (~self.alive).sum(axis=-1)

    @property
    def n_paths(self) -> int:
        return self.alive.shape[-1]


def simulate_ensemble(
    model: DriftModel,
    x0,
    T: float,
    dt: float,
    N: int,
    seed: int,
    *,
    checkpoints: Sequence[float] | None = None,
    tangent: bool = False,
    integral: bool = False,
    store_x: bool = False,
    scheme: str = "euler",
    eta=None,
    threads: int | None = None,
) -> Ensemble:
    """Run N trajectories from each of G start points with common random numbers.

    ``x0`` has shape (G, d) (or (d,) for a single point).  Trajectory ``i``
    uses the same noise for every start point, and that noise depends only on
    ``(seed, i)``.  The tangent is tracked as a full matrix Phi_t with
    Phi_0 = Id.  ``eta`` overrides the model's curvature bound for the
    running integral.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown tangent scheme {scheme!r}")
    if scheme == "exponential" and model.dim != 1:
        raise ValueError("the exponential tangent scheme is one-dimensional")
    N = int(N)
    if N < 1:
        raise ValueError("N must be positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    G, d = x0.shape
    if d != model.dim:
        raise ValueError(f"start points have dimension {d}, model has {model.dim}")
    n = num_steps(T, dt)
    ck = checkpoint_steps(checkpoints, T, dt)
    eta_fn = model.eta if eta is None else eta
    sigma = model.sigma
    kdim = model.noise_dim
    sq = np.sqrt(dt)
    one_d = d == 1

    def run(block):
        k, start, stop = block
        nb = stop - start
        gen = block_generator(seed, k, MAIN)
        x = np.repeat(x0[:, None, :], nb, axis=1)
        dead = np.zeros((G, nb), dtype=bool)
        phi = None
        if tangent:
            phi = np.ones((G, nb)) if one_d else np.broadcast_to(np.eye(d), (G, nb, d, d)).copy()
        I = np.zeros((G, nb)) if integral else None
        eta_k = eta_fn(x) if integral else None
        J_k = model.jacobian(x) if tangent else None
        out_x, out_phi, out_I = [], [], []
        ci = 0

        def record():
            if store_x:
                out_x.append(x.copy())
            if tangent:
                out_phi.append(phi[..., None, None].copy() if one_d else phi.copy())
            if integral:
                out_I.append(I.copy())

        if ck[0] == 0:
            record()
            ci = 1
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(1, n + 1):
                xi = gen.standard_normal((BLOCK, kdim))[:nb]
                inc = noise_increment(sigma, xi, sq)
                x_new = x + model.drift(x) * dt + inc
                bad = _diverged(x_new)
                if bad.any():
                    dead |= bad
                    x_new[dead] = 0.0
                if tangent:
                    J_new = model.jacobian(x_new)
                    if scheme == "exponential":
                        phi = phi * np.exp(0.5 * dt * (J_k[..., 0, 0] + J_new[..., 0, 0]))
                    elif one_d:
                        phi = phi + dt * (J_k[..., 0, 0] * phi)
                    else:
                        phi = phi + dt * (J_k @ phi)
                    J_k = J_new
                if integral:
                    eta_new = eta_fn(x_new)
                    I = I + 0.5 * dt * (eta_k + eta_new)
                    eta_k = eta_new
                if bad.any():
                    if tangent:
                        phi[dead] = 0.0
                    if integral:
                        I[dead] = 0.0
                x = x_new
                if ci < len(ck) and step == ck[ci]:
                    record()
                    ci += 1
        stack = lambda lst: np.stack(lst) if lst else None  # noqa: E731
        return ~dead, stack(out_x), stack(out_phi), stack(out_I)

    parts = ordered_map(run, block_ranges(N), threads)
    cat = lambda i: None if parts[0][i] is None else np.concatenate([p[i] for p in parts], axis=2)  # noqa: E731
    alive = np.concatenate([p[0] for p in parts], axis=1)
    return Ensemble(times=ck * dt, alive=alive, x=cat(1), phi=cat(2), integral=cat(3))
