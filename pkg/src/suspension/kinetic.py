"""Weighted sample representation of kinetic densities and their transport.

Both the zero-order model and the corrected Doi model are pure transport in
``(x, xi)``, so a density is carried as a weighted cloud of samples moved
along characteristics.  The divergence term in ``xi`` is the Jacobian of the
orientation flow and never appears explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import Ellipsoid, FlowField
from .particle import ParticleShape, mobility_matrix
from .pointproc import Ball, Box, MarkLaw, make_domain, make_mark_law

ORIGINS = ("empirical", "continuum")


@dataclass(frozen=True)
class KineticEnsemble:
    """Samples ``(x_a, xi_a, w_a)`` at time ``t``; weights sum to one.

    ``x0``/``xi0`` keep the Lagrangian labels (positions and marks at time
    zero) when they are known.
    """
    x: np.ndarray
    xi: np.ndarray
    w: np.ndarray
    t: float = 0.0
    origin: str = "continuum"
    x0: np.ndarray = None
    xi0: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, float))
        xi = np.atleast_2d(np.asarray(self.xi, float))
        w = np.atleast_1d(np.asarray(self.w, float))
        if x.shape != xi.shape or x.shape[1] != 3 or len(w) != len(x):
            raise ValueError("ensemble arrays must be (n, 3), (n, 3), (n,)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got sum {w.sum():.17g}")
        if np.any(np.abs(np.linalg.norm(xi, axis=1) - 1.0) > 1e-10):
            raise ValueError("orientations must be unit vectors")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "w", w)
        for name in ("x0", "xi0"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.atleast_2d(np.asarray(v, float)))

    @property
    def n(self):
        return len(self.x)

    def replace(self, **kw):
        d = dict(x=self.x, xi=self.xi, w=self.w, t=self.t, origin=self.origin,
                 x0=self.x0, xi0=self.xi0, meta=dict(self.meta))
        d.update(kw)
        return KineticEnsemble(**d)

    @classmethod
    def uniform(cls, x, xi, t=0.0, origin="continuum", **kw):
        n = len(np.atleast_2d(x))
        return cls(x, xi, np.full(n, 1.0 / n), t, origin, **kw)

    @classmethod
    def from_configuration(cls, cfg):
        """Empirical measure ``(1/N) sum delta_(X_i, xi_i)`` of a particle configuration."""
        return cls.uniform(cfg.X, cfg.xi, cfg.t, "empirical")

    def to_csv(self, path):
        rows = np.column_stack([np.full(self.n, self.t), self.x, self.xi, self.w])
        np.savetxt(path, rows, delimiter=",", header="t,x1,x2,x3,xi1,xi2,xi3,w", comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, origin="continuum"):
        rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
        ts = np.unique(rows[:, 0])
        if len(ts) != 1:
            raise ValueError(f"{path}: snapshot mixes {len(ts)} times")
        xi = rows[:, 4:7]
        return cls(rows[:, 1:4], xi / np.linalg.norm(xi, axis=1, keepdims=True), rows[:, 7] / rows[:, 7].sum(),
                   float(ts[0]), origin)


# --- continuum densities -------------------------------------------------

def _bounding_box(support):
    if isinstance(support, Box):
        return np.asarray(support.lo, float), np.asarray(support.hi, float)
    if isinstance(support, Ball):
        c = np.asarray(support.center, float)
        return c - support.radius, c + support.radius
    if isinstance(support, Ellipsoid):
        c = np.asarray(support.center, float)
        return c - support.outer_radius, c + support.outer_radius
    raise TypeError(f"unsupported support {type(support).__name__}")


@dataclass
class ContinuumDensity:
    """Product density ``rho(x) kappa(xi)``; ``rho`` integrates to one on ``support``."""
    rho: object
    support: object
    mark_law: MarkLaw
    rho_max: float

    def sample_positions(self, n, rng, batch=4096):
        lo, hi = _bounding_box(self.support)
        out, have = np.zeros((n, 3)), 0
        while have < n:
            y = lo + rng.random((batch, 3)) * (hi - lo)
            keep = y[rng.random(batch) * self.rho_max < self.rho(y)]
            take = min(len(keep), n - have)
            out[have:have + take] = keep[:take]
            have += take
        return out


def uniform_density(domain, mark_law: MarkLaw) -> ContinuumDensity:
    """``(1_O / |O|) kappa``."""
    vol = domain.volume

    def rho(x):
        return domain.contains(x) / vol
    return ContinuumDensity(rho, domain, mark_law, 1.0 / vol)


def bump_density(center, radius, mark_law: MarkLaw) -> ContinuumDensity:
    """Normalized ``(1 - |x - c|^2 / R^2)^4`` on the ball of radius ``R``."""
    c = np.asarray(center, float)
    Z = 4.0 * np.pi * radius**3 * 128.0 / 3465.0

    def rho(x):
        s2 = np.sum((np.asarray(x, float) - c) ** 2, axis=-1) / radius**2
        return np.where(s2 < 1.0, (1.0 - np.minimum(s2, 1.0)) ** 4, 0.0) / Z
    return ContinuumDensity(rho, Ellipsoid.ball(c, radius), mark_law, 1.0 / Z)


def make_density(spec) -> ContinuumDensity:
    """From ``ContinuumDensity`` or ``{"domain": {...}, "marks": {...}}``.

    A domain of kind ``bump`` (``center``, ``radius``) gives the smooth
    polynomial bump, any other kind the uniform density on that domain.
    """
    if isinstance(spec, ContinuumDensity):
        return spec
    if not isinstance(spec, dict) or "domain" not in spec:
        raise ValueError("initial density spec needs a 'domain' record")
    dom = spec["domain"]
    law = make_mark_law(spec.get("marks", {"kind": "uniform"}))
    if dom.get("kind") == "bump":
        return bump_density(dom.get("center", (0.0, 0.0, 0.0)), float(dom["radius"]), law)
    return uniform_density(make_domain(dom), law)


def sample_initial(f0_spec, n_samples, seed) -> KineticEnsemble:
    """``n_samples`` i.i.d. draws of ``f0`` with uniform weights, labels recorded."""
    if int(n_samples) < 1:
        raise ValueError("need at least one sample")
    dens = make_density(f0_spec)
    rng = np.random.default_rng(seed)
    x = dens.sample_positions(int(n_samples), rng)
    xi = dens.mark_law.sample(int(n_samples), rng)
    return KineticEnsemble.uniform(x, xi, 0.0, "continuum", x0=x, xi0=xi, meta={"seed": seed})


# --- transport -----------------------------------------------------------

def _unit(xi):
    return xi / np.linalg.norm(xi, axis=-1, keepdims=True)


def _transport(ens: KineticEnsemble, rhs, T, dt):
    """Fixed-step RK4 of ``(x, xi)`` over a duration ``T`` (negative: backwards)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(np.ceil(abs(T) / dt - 1e-9))
    x, xi, t = ens.x.copy(), ens.xi.copy(), float(ens.t)
    if n:
        h = T / n
        for _ in range(n):
            k1 = rhs(t, x, xi)
            k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1[0], _unit(xi + 0.5 * h * k1[1]))
            k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2[0], _unit(xi + 0.5 * h * k2[1]))
            k4 = rhs(t + h, x + h * k3[0], _unit(xi + h * k3[1]))
            x = x + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            xi = _unit(xi + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]))
            t += h
    labels = {}
    if ens.x0 is None and ens.t == 0:
        labels = dict(x0=ens.x, xi0=ens.xi)
    return ens.replace(x=x, xi=xi, t=ens.t + T, **labels)


def evolve_zero_order(ens: KineticEnsemble, u: FlowField, shape: ParticleShape, T, dt) -> KineticEnsemble:
    """Push ``ens`` forward by ``T`` along ``x' = u(x)``, ``xi' = M(xi) grad u(x) xi``."""
    def rhs(t, x, xi):
        return u.velocity(x), np.einsum("nij,nj->ni", mobility_matrix(shape, xi, u.gradient(x)), xi)
    return _transport(ens, rhs, T, dt)


def evolve_corrected(ens: KineticEnsemble, u_phi: FlowField, u: FlowField, B, shape: ParticleShape,
                     phi, T, dt) -> KineticEnsemble:
    """Characteristics of the corrected model: ``x' = u_phi``, ``xi' = M(xi)(grad u_phi + phi B) xi``.

    ``B(t, x, xi)`` returns ``(n, 3, 3)``; ``None`` drops the correlation
    term.  ``u_phi = None`` falls back to ``u``.
    """
    flow = u if u_phi is None else u_phi
    phi = float(phi)

    def rhs(t, x, xi):
        g = flow.gradient(x)
        if phi != 0.0 and B is not None:
            Bx = np.asarray(B(t, x, xi), float)
            bad = ~np.isfinite(Bx).all(axis=(1, 2))
            if np.any(bad):
                raise ValueError(f"B undefined at sample {int(np.nonzero(bad)[0][0])}")
            g = g + phi * Bx
        return flow.velocity(x), np.einsum("nij,nj->ni", mobility_matrix(shape, xi, g), xi)
    return _transport(ens, rhs, T, dt)


class TimeDependentB:
    """``B(t, x, xi)`` built from per-time ``BField`` evaluators, cached by ``t``."""

    def __init__(self, factory):
        self.factory = factory
        self._cache = {}

    def __call__(self, t, x, xi=None):
        key = round(float(t), 12)
        if key not in self._cache:
            self._cache[key] = self.factory(key)
        return self._cache[key](x, xi)
