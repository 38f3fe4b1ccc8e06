"""N-particle dynamics: truncated reflections and the approximate system.

Each particle acts on the fluid through its dipole far field
``r^3 h[S(xi_j) E_j](x - X_j)``; reflections iterate the strains seen by
the particles.  Velocities of the particles are the reflected field at their
centres, orientations turn with ``M(xi) grad u_N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .particle import ParticleShape, mobility_matrix, stresslet_apply


class PreconditionError(ValueError):
    pass


class OverlapError(RuntimeError):
    pass


@dataclass(frozen=True)
class Configuration:
    X: np.ndarray
    xi: np.ndarray
    r: float
    t: float = 0.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, float))
        xi = np.atleast_2d(np.asarray(self.xi, float))
        if X.shape != xi.shape or X.shape[1] != 3:
            raise ValueError("positions and orientations must both be (N, 3)")
        if np.any(np.abs(np.linalg.norm(xi, axis=1) - 1.0) > 1e-8):
            raise ValueError("orientations must be unit vectors")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "xi", xi)

    @property
    def N(self):
        return len(self.X)

    @property
    def phi(self):
        return self.N * self.r**3

    @classmethod
    def from_phi(cls, X, xi, phi, t=0.0):
        X = np.atleast_2d(np.asarray(X, float))
        return cls(X, xi, (phi / len(X)) ** (1.0 / 3.0), t)

    def replace(self, **kw):
        d = dict(X=self.X, xi=self.xi, r=self.r, t=self.t)
        d.update(kw)
        return Configuration(**d)


def _pair_distances(X):
    d = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d


def config_stats(cfg: Configuration):
    """``d_min`` and ``S_k = (1/N) max_i sum_{j != i} d_ij^-k`` for ``k = 1..4``."""
    if cfg.N < 2:
        raise ValueError("configuration statistics need N >= 2")
    d = _pair_distances(cfg.X)
    S = {k: float((d ** -float(k)).sum(1).max() / cfg.N) for k in (1, 2, 3, 4)}
    return float(d.min()), S


@dataclass
class ReflectionState:
    velocity: np.ndarray
    gradient: np.ndarray        # rigid gradient M(xi) grad u_N at the particles
    field_gradient: np.ndarray  # gradient of the reflected field itself
    residual: float
    history: list = field(default_factory=list)
    order: int = 0


def check_gate(cfg: Configuration, max_phi_s3=0.2):
    """Preconditions of the reflection scheme; returns the violated ones."""
    problems = []
    if cfg.N >= 2:
        dmin, S = config_stats(cfg)
        if dmin < 4.0 * cfg.r:
            problems.append(f"d_min = {dmin:.4g} < 4 r = {4 * cfg.r:.4g}")
        if cfg.phi * S[3] >= max_phi_s3:
            problems.append(f"phi S_3 = {cfg.phi * S[3]:.4g} >= {max_phi_s3}")
    return problems


def _strain_of(grad):
    return 0.5 * (grad + np.swapaxes(grad, -1, -2))


def _offdiag(N):
    i, j = np.nonzero(~np.eye(N, dtype=bool))
    return i, j


def reflect_solve(cfg: Configuration, u, shape: ParticleShape, K=3, max_phi_s3=0.2, tol=1e-10):
    """Method of reflections truncated at order ``K`` with dipole far fields."""
    problems = check_gate(cfg, max_phi_s3)
    if problems:
        raise PreconditionError("reflections refused: " + "; ".join(problems))
    X, xi, r3 = cfg.X, cfg.xi, cfg.r**3
    N = cfg.N
    vel = np.array(u.velocity(X), float)
    gfield = np.array(u.gradient(X), float)
    E = _strain_of(gfield)
    history = [float(np.abs(E).max()) if N else 0.0]
    i, j = _offdiag(N)
    d = X[i] - X[j]
    order = 0
    for _ in range(K):
        if history[-1] < tol or N < 2:
            break
        src = r3 * stresslet_apply(shape, xi, E)
        h, _ = kernels.dipole_field(src[j], d)
        g = kernels.oseen_hess_apply(d, src[j])
        dv = np.zeros((N, 3))
        dg = np.zeros((N, 3, 3))
        np.add.at(dv, i, h)
        np.add.at(dg, i, g)
        vel = vel + dv
        gfield = gfield + dg
        E = _strain_of(dg)
        order += 1
        history.append(float(np.abs(E).max()))
    rigid = mobility_matrix(shape, xi, gfield) if N else np.zeros((0, 3, 3))
    return ReflectionState(vel, rigid, gfield, history[-1], history, order)


def _rk4(state, rhs, dt):
    X, xi = state
    k1 = rhs(X, xi)
    k2 = rhs(X + 0.5 * dt * k1[0], _unit(xi + 0.5 * dt * k1[1]))
    k3 = rhs(X + 0.5 * dt * k2[0], _unit(xi + 0.5 * dt * k2[1]))
    k4 = rhs(X + dt * k3[0], _unit(xi + dt * k3[1]))
    X = X + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    xi = xi + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    return X, _unit(xi)


def _unit(xi):
    return xi / np.linalg.norm(xi, axis=-1, keepdims=True)


def _check_overlap(X, r):
    if len(X) < 2:
        return
    d = _pair_distances(X)
    k = np.unravel_index(np.argmin(d), d.shape)
    if d[k] <= 2.0 * r:
        raise OverlapError(f"particles {k[0]} and {k[1]} overlap: distance {d[k]:.4g} <= 2 r")


def step_micro(cfg: Configuration, u, shape: ParticleShape, dt, K=3, max_phi_s3=0.2):
    """One RK4 step of the microscopic system, reflections re-solved per stage."""
    if dt == 0:
        return cfg

    def rhs(X, xi):
        st = reflect_solve(cfg.replace(X=X, xi=xi), u, shape, K, max_phi_s3)
        return st.velocity, np.einsum("nij,nj->ni", st.gradient, xi)

    X, xi = _rk4((cfg.X, cfg.xi), rhs, dt)
    _check_overlap(X, cfg.r)
    return cfg.replace(X=X, xi=xi, t=cfg.t + dt)


def interaction_gradient(X, xi, u, shape: ParticleShape, r3):
    """``r^3 sum_{j != i} hess G(X_i - X_j) (S(xi_j) Du(X_j))`` for every ``i``."""
    N = len(X)
    out = np.zeros((N, 3, 3))
    if N < 2:
        return out
    d = _pair_distances(X)
    if np.any(d == 0):
        k = np.unravel_index(np.argmin(d), d.shape)
        raise ValueError(f"coincident positions for particles {k[0]} and {k[1]}")
    src = r3 * stresslet_apply(shape, xi, u.strain(X))
    i, j = _offdiag(N)
    np.add.at(out, i, kernels.oseen_hess_apply(X[i] - X[j], src[j]))
    return out


def step_approx(cfg: Configuration, u, u_phi, shape: ParticleShape, dt):
    """One RK4 step of ``X' = u_phi(X)``, ``xi' = M(xi)(grad u + pair sum) xi``."""
    if dt == 0:
        return cfg
    r3 = cfg.r**3

    def rhs(X, xi):
        g = u.gradient(X) + interaction_gradient(X, xi, u, shape, r3)
        return u_phi.velocity(X), np.einsum("nij,nj->ni", mobility_matrix(shape, xi, g), xi)

    X, xi = _rk4((cfg.X, cfg.xi), rhs, dt)
    return cfg.replace(X=X, xi=xi, t=cfg.t + dt)


def lattice_configuration(n_side, spacing, phi, xi=(0.0, 0.0, 1.0), center=True):
    g = np.arange(n_side) * spacing
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    if center:
        X = X - X.mean(0)
    xi = np.broadcast_to(np.asarray(xi, float) / np.linalg.norm(xi), X.shape)
    return Configuration.from_phi(X, xi, phi)


def save_trajectory(rows, path):
    """Rows of ``(t, i, X1, X2, X3, xi1, xi2, xi3)`` as CSV."""
    arr = np.asarray(rows, float)
    np.savetxt(path, arr, delimiter=",", header="t,i,x1,x2,x3,xi1,xi2,xi3", comments="", fmt="%.17g")


def snapshot_rows(cfg: Configuration):
    n = cfg.N
    return np.column_stack([np.full(n, cfg.t), np.arange(n), cfg.X, cfg.xi])
