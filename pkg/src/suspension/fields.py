"""Background Stokes flows, the first-order corrected flow and flow maps.

Every flow exposes ``velocity``, ``gradient`` (``out[..., i, j] = d_j u_i``)
and ``strain``.  Stokes solves are kernel convolutions evaluated with
spherical quadratures centred at the evaluation point, so no grids and no
artificial boundaries enter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .particle import ParticleShape, mobility_apply, stresslet_apply


# --- supports ------------------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    """Region ``(x - c) . Q (x - c) <= 1``; used as a compact support."""
    center: tuple
    Q: tuple

    @classmethod
    def ball(cls, center, radius):
        return cls(tuple(map(float, center)), tuple(map(tuple, np.eye(3) / radius**2)))

    @property
    def c(self):
        return np.asarray(self.center, float)

    @property
    def q(self):
        return np.asarray(self.Q, float)

    @property
    def volume(self):
        return 4.0 / 3.0 * np.pi / np.sqrt(np.linalg.det(self.q))

    @property
    def outer_radius(self):
        return 1.0 / np.sqrt(np.linalg.eigvalsh(self.q).min())

    def contains(self, x):
        d = np.asarray(x, float) - self.c
        return np.einsum("...i,ij,...j->...", d, self.q, d) <= 1.0

    def ray_interval(self, z, omega):
        """Parameters ``r`` where ``z - r omega`` crosses the boundary.

        Returns ``(r_in, r_out)`` clipped to ``r >= 0``; empty rays give
        ``r_in = r_out = 0``.
        """
        d = np.asarray(z, float) - self.c
        q = self.q
        a = np.einsum("...i,ij,...j->...", omega, q, omega)
        b = -2.0 * np.einsum("...i,ij,...j->...", d, q, omega)
        cc = np.einsum("...i,ij,...j->...", d, q, d) - 1.0
        disc = b * b - 4.0 * a * cc
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        r1 = np.where(ok, (-b - sq) / (2.0 * a), 0.0)
        r2 = np.where(ok, (-b + sq) / (2.0 * a), 0.0)
        r1 = np.clip(r1, 0.0, None)
        r2 = np.clip(r2, 0.0, None)
        return r1, r2

    def quadrature(self, n_r=8, n_theta=8, n_phi=16):
        """Nodes and weights on the ellipsoid from a ball rule."""
        rg, wr = np.polynomial.legendre.leggauss(n_r)
        rg = 0.5 * (rg + 1.0)
        wr = 0.5 * wr
        ang, wa = kernels.sphere_rule(n_theta, n_phi)
        y = (rg[:, None, None] * ang[None]).reshape(-1, 3)
        w = ((wr * rg**2)[:, None] * wa[None]).ravel()
        vals, vecs = np.linalg.eigh(self.q)
        T = vecs @ np.diag(vals**-0.5) @ vecs.T
        return self.c + y @ T.T, w * np.linalg.det(T)


def union_support(a: Ellipsoid, b: Ellipsoid):
    c = 0.5 * (a.c + b.c)
    R = max(np.linalg.norm(a.c - c) + a.outer_radius, np.linalg.norm(b.c - c) + b.outer_radius)
    return Ellipsoid.ball(c, R)


# --- flows ---------------------------------------------------------------

class FlowField:
    provenance = "abstract"
    support = None

    def velocity(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def strain(self, x):
        g = self.gradient(x)
        return 0.5 * (g + np.swapaxes(g, -1, -2))


class ZeroFlow(FlowField):
    provenance = "preset:zero"

    def velocity(self, x):
        return np.zeros(np.shape(x))

    def gradient(self, x):
        return np.zeros(np.shape(x) + (3,))


class LinearFlow(FlowField):
    """``u(x) = L x`` with tracefree ``L``."""
    provenance = "preset:linear"

    def __init__(self, L):
        self.L = kernels.check_tracefree(np.asarray(L, float), tol=1e-10)

    def velocity(self, x):
        return np.asarray(x, float) @ self.L.T

    def gradient(self, x):
        return np.broadcast_to(self.L, np.shape(x) + (3,)).copy()


def _smoothstep(rho):
    """C2 cutoff: 1 for rho <= 1, 0 for rho >= 2, with first two derivatives."""
    s = np.clip(rho - 1.0, 0.0, 1.0)
    chi = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    d1 = -30.0 * s * s * (1.0 - s) ** 2
    d2 = -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return chi, d1, d2


class ShearCutoff(FlowField):
    """Simple shear ``gamma x_2 e_1`` inside ``|x| <= R``, compactly cut off by ``2R``.

    The field is ``curl(chi(|x|/R) gamma/2 x_2^2 e_3)``, divergence free by
    construction and equal to the exact shear on the inner ball.
    """
    provenance = "preset:shear_cutoff"

    def __init__(self, gamma=1.0, radius=4.0):
        self.gamma = float(gamma)
        self.R = float(radius)

    def _psi_derivs(self, x):
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)
        rs = np.where(r > 0, r, 1.0)
        chi, d1, d2 = _smoothstep(r / self.R)
        q = 0.5 * self.gamma * x[..., 1] ** 2
        gq = np.zeros(x.shape)
        gq[..., 1] = self.gamma * x[..., 1]
        hq = np.zeros(x.shape + (3,))
        hq[..., 1, 1] = self.gamma
        xh = x / rs[..., None]
        grad = chi[..., None] * gq + (q * d1 / self.R)[..., None] * xh
        outer = lambda a, b: a[..., :, None] * b[..., None, :]
        hess = chi[..., None, None] * hq
        hess = hess + (d1 / self.R)[..., None, None] * (outer(gq, xh) + outer(xh, gq))
        proj = np.eye(3) - outer(xh, xh)
        hess = hess + q[..., None, None] * ((d2 / self.R**2)[..., None, None] * outer(xh, xh)
                                            + (d1 / (self.R * rs))[..., None, None] * proj)
        return grad, hess

    def velocity(self, x):
        g, _ = self._psi_derivs(x)
        u = np.zeros(np.shape(x))
        u[..., 0] = g[..., 1]
        u[..., 1] = -g[..., 0]
        return u

    def gradient(self, x):
        _, h = self._psi_derivs(x)
        out = np.zeros(np.shape(x) + (3,))
        out[..., 0, :] = h[..., 1, :]
        out[..., 1, :] = -h[..., 0, :]
        return out


def _bump(s, power=4):
    return np.where(s < 1.0, np.clip(1.0 - s * s, 0.0, None) ** power, 0.0)


def _bump_ds(s, power=4):
    return np.where(s < 1.0, -2.0 * power * s * np.clip(1.0 - s * s, 0.0, None) ** (power - 1), 0.0)


class OseenConvolution(FlowField):
    """Stokes flow ``u = G * g`` of a compact polynomial force bump.

    ``g(y) = F b(|y - c| / R) / Z`` with ``b(s) = (1 - s^2)^4`` and ``Z``
    normalizing ``integral g = F``.  Points well outside the support use a
    Gauss rule on the support; other points use a spherical rule centred at
    the evaluation point, where ``G(r w) r^2`` is bounded.
    """
    provenance = "oseen-convolution"

    def __init__(self, force, center=(0.0, 0.0, 0.0), radius=1.0, n_r=16, n_theta=16, n_phi=32):
        self.F = np.asarray(force, float)
        self.c = np.asarray(center, float)
        self.Rg = float(radius)
        if not self.Rg > 0 or not np.all(np.isfinite(self.F)):
            raise ValueError("force bump needs a finite force and positive radius")
        self.support = Ellipsoid.ball(self.c, self.Rg)
        # Z = 4 pi R^3 int_0^1 (1 - s^2)^4 s^2 ds
        self.Z = 4.0 * np.pi * self.Rg**3 * 128.0 / 3465.0
        self.rule = (n_r, n_theta, n_phi)
        self.nodes, self.weights = self.support.quadrature(n_r, n_theta, n_phi)

    def force(self, y):
        s = np.linalg.norm(np.asarray(y, float) - self.c, axis=-1) / self.Rg
        return _bump(s)[..., None] * self.F / self.Z

    def force_grad(self, y):
        d = np.asarray(y, float) - self.c
        r = np.linalg.norm(d, axis=-1)
        s = r / self.Rg
        ds = _bump_ds(s) / (self.Rg * np.where(r > 0, r, 1.0))
        return self.F[:, None] * (ds[..., None] * d)[..., None, :] / self.Z

    def _split(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        far = np.linalg.norm(x - self.c, axis=-1) > 1.5 * self.Rg
        return x, far

    def _near(self, x, grad):
        n_r, n_t, n_p = self.rule
        ang, wa = kernels.sphere_rule(n_t, n_p)
        out = []
        for z in x:
            r_in, r_out = self.support.ray_interval(z, ang)
            rg, wr = np.polynomial.legendre.leggauss(2 * n_r)
            t = 0.5 * (rg + 1.0)
            r = r_in[:, None] + (r_out - r_in)[:, None] * t[None]
            w = wa[:, None] * (r_out - r_in)[:, None] * 0.5 * wr[None]
            pts = z - r[..., None] * ang[:, None, :]
            Gw = kernels.oseen(ang)  # G(r w) r^2 = r G(w)
            if grad:
                gf = self.force_grad(pts)
                out.append(np.einsum("a,aik,ab,abkj->ij", np.ones(len(ang)), Gw, w * r, gf))
            else:
                f = self.force(pts)
                out.append(np.einsum("aik,ab,abk->i", Gw, w * r, f))
        return np.array(out)

    def velocity(self, x):
        shape = np.shape(x)
        x, far = self._split(x)
        u = np.zeros(x.shape)
        if np.any(far):
            G = kernels.oseen(x[far][:, None, :] - self.nodes[None])
            u[far] = np.einsum("nqik,q,qk->ni", G, self.weights, self.force(self.nodes))
        if np.any(~far):
            u[~far] = self._near(x[~far], False)
        return u.reshape(shape)

    def gradient(self, x):
        shape = np.shape(x)
        x, far = self._split(x)
        g = np.zeros(x.shape + (3,))
        if np.any(far):
            dG = kernels.oseen_grad(x[far][:, None, :] - self.nodes[None])
            g[far] = np.einsum("nqikj,q,qk->nij", dG, self.weights, self.force(self.nodes))
        if np.any(~far):
            g[~far] = self._near(x[~far], True)
        return g.reshape(shape + (3,))


def background_flow(desc) -> FlowField:
    """Build a flow from a descriptor dict.

    ``{"kind": "zero"}``, ``{"kind": "linear", "L": 3x3}``,
    ``{"kind": "shear_cutoff", "gamma": .., "radius": ..}`` or
    ``{"kind": "bump", "force": (..), "center": (..), "radius": ..}``.
    """
    kind = desc.get("kind")
    if kind == "zero":
        return ZeroFlow()
    if kind == "linear":
        return LinearFlow(desc["L"])
    if kind == "shear_cutoff":
        return ShearCutoff(desc.get("gamma", 1.0), desc.get("radius", 4.0))
    if kind == "bump":
        if "radius" not in desc or not np.isfinite(float(desc["radius"])):
            raise ValueError("force bump needs a finite support radius")
        return OseenConvolution(desc["force"], desc.get("center", (0.0, 0.0, 0.0)), desc["radius"])
    raise ValueError(f"unknown or non-compact force descriptor {kind!r}")


# --- effective viscosity -------------------------------------------------

class ViscosityField:
    """Pointwise linear map ``E -> V(x) E`` on symmetric tracefree matrices."""
    support: Ellipsoid = None
    meta: dict

    def apply(self, x, E):
        raise NotImplementedError

    def tensor(self, x):
        """Fourth-order tensor ``out[..., i, j, k, l]`` with ``(V E)_ij = out_ijkl E_kl``."""
        x = np.asarray(x, float)
        basis = _sym0_basis()
        cols = [self.apply(x, np.broadcast_to(B, x.shape[:-1] + (3, 3))) for B in basis]
        # V is only defined on sym0; extend by zero on the orthogonal complement
        dual = _sym0_dual()
        return sum(np.einsum("...ij,kl->...ijkl", c, D) for c, D in zip(cols, dual))


def _sym0_basis():
    e = np.eye(3)
    out = []
    for a, b in ((0, 1), (0, 2), (1, 2)):
        out.append(np.outer(e[a], e[b]) + np.outer(e[b], e[a]))
    out.append(np.outer(e[0], e[0]) - np.outer(e[2], e[2]))
    out.append(np.outer(e[1], e[1]) - np.outer(e[2], e[2]))
    return out


def _sym0_dual():
    B = np.array([b.ravel() for b in _sym0_basis()])
    # dual basis within sym0 under the Frobenius product
    G = B @ B.T
    D = np.linalg.solve(G, B)
    return [d.reshape(3, 3) for d in D]


class KDEViscosity(ViscosityField):
    """``V(x) E = sum_a w_a K_h(x - x_a) S(xi_a) E`` with a Gaussian kernel."""

    def __init__(self, x, xi, w, shape: ParticleShape, bandwidth):
        self.x = np.asarray(x, float)
        self.xi = np.asarray(xi, float)
        self.w = np.asarray(w, float)
        self.shape = shape
        self.h = float(bandwidth)
        c = self.x.mean(0)
        R = np.linalg.norm(self.x - c, axis=1).max() + 5.0 * self.h
        self.support = Ellipsoid.ball(c, R)
        self.meta = {"bandwidth": self.h, "n": len(self.x)}

    def density(self, x):
        x = np.asarray(x, float)
        d2 = ((x[..., None, :] - self.x) ** 2).sum(-1)
        K = np.exp(-0.5 * d2 / self.h**2) / (2.0 * np.pi * self.h**2) ** 1.5
        return K @ self.w

    def apply(self, x, E, chunk=2048):
        x = np.asarray(x, float)
        E = np.broadcast_to(np.asarray(E, float), x.shape[:-1] + (3, 3))
        flat_x = x.reshape(-1, 3)
        flat_E = E.reshape(-1, 3, 3)
        out = np.zeros(flat_E.shape)
        norm = (2.0 * np.pi * self.h**2) ** -1.5
        for s in range(0, len(flat_x), chunk):
            xs = flat_x[s:s + chunk]
            d2 = ((xs[:, None, :] - self.x[None]) ** 2).sum(-1)
            K = norm * np.exp(-0.5 * d2 / self.h**2) * self.w
            # S(xi) E is linear in E: expand over the three coefficient pieces
            Es = flat_E[s:s + chunk]
            Ex = np.einsum("nij,aj->nai", Es, self.xi)
            xEx = np.einsum("ai,nai->na", self.xi, Ex)
            xx = self.xi[:, :, None] * self.xi[:, None, :]
            sh = self.shape
            k = K.sum(1)
            res = sh.c_iso * k[:, None, None] * Es
            res += sh.c_axial * np.einsum("na,aij->nij", K * xEx, xx - np.eye(3) / 3.0)
            cross = np.einsum("na,ai,naj->nij", K, self.xi, Ex)
            cross = cross + np.swapaxes(cross, -1, -2)
            cross -= 2.0 * np.einsum("na,aij->nij", K * xEx, xx)
            res += sh.c_cross * cross
            out[s:s + chunk] = res
        return out.reshape(E.shape)


class DensityViscosity(ViscosityField):
    """``V(x) E = rho(x) Sbar E`` for a product density ``rho(x) kappa(xi)``."""

    def __init__(self, rho, support: Ellipsoid, mark_law, shape: ParticleShape, n_theta=16, n_phi=32):
        self.rho = rho
        self.support = support
        self.shape = shape
        pts, w = mark_law.quadrature(n_theta, n_phi)
        self._marks = (pts, w)
        self.meta = {"kind": "density", "mark_nodes": len(w)}
        basis, dual = _sym0_basis(), _sym0_dual()
        cols = []
        for B in basis:
            S = stresslet_apply(shape, pts, np.broadcast_to(B, (len(pts), 3, 3)))
            cols.append(np.einsum("q,qij->ij", w, S))
        self.Sbar = sum(np.einsum("ij,kl->ijkl", c, D) for c, D in zip(cols, dual))

    def mean_stresslet(self, E):
        return np.einsum("ijkl,...kl->...ij", self.Sbar, np.asarray(E, float))

    def apply(self, x, E):
        x = np.asarray(x, float)
        E = np.broadcast_to(np.asarray(E, float), x.shape[:-1] + (3, 3))
        return self.rho(x)[..., None, None] * self.mean_stresslet(E)


def mean_spacing(x):
    x = np.asarray(x, float)
    ext = x.max(0) - x.min(0)
    vol = np.prod(np.maximum(ext, 1e-12))
    return (vol / max(len(x), 1)) ** (1.0 / 3.0)


def effective_viscosity(f, shape: ParticleShape, bandwidth=None) -> ViscosityField:
    """Kernel-density effective viscosity of a weighted ensemble.

    The bandwidth defaults to the mean interparticle spacing of the samples
    and is recorded in ``meta``.
    """
    w = np.asarray(f.w, float)
    if np.any(w < 0):
        raise ValueError("ensemble weights must be nonnegative")
    h = mean_spacing(f.x) if bandwidth is None else float(bandwidth)
    return KDEViscosity(f.x, f.xi, w, shape, h)


# --- first-order corrected flow -----------------------------------------

def _local_term(T):
    """``integral_{S^2} h[T](w) (x) w dw``, the delta part of the dipole gradient."""
    Tt = np.swapaxes(T, -1, -2)
    return -(T + Tt) / 10.0 - (T - Tt) / 6.0


def ray_rule(support: Ellipsoid, z, ang, n_r):
    """Gauss nodes on the chords of ``support`` along rays ``z - r w``."""
    r_in, r_out = support.ray_interval(z, ang)
    g, w = np.polynomial.legendre.leggauss(n_r)
    t = 0.5 * (g + 1.0)
    r = r_in[:, None] + (r_out - r_in)[:, None] * t[None]
    wr = (r_out - r_in)[:, None] * 0.5 * w[None]
    return r, wr, r_in, r_out


def pv_hess_convolution(source, support: Ellipsoid, z, ang, wa, n_r, hess=None):
    """``PV int hess G(z - x) T(x) dx`` for ``T`` vanishing outside ``support``.

    Spherical coordinates about ``z``; the kernel is -3 homogeneous with zero
    angular mean, so inside the support the integrand is ``(T(z - r w) -
    T(z)) / r`` plus ``T(z) log r_out``.  ``out[n, i, j]``.
    """
    z = np.atleast_2d(np.asarray(z, float))
    H = kernels.oseen_hess(ang) if hess is None else hess
    out = np.zeros(z.shape + (3,))
    for n, zz in enumerate(z):
        r, wr, r_in, r_out = ray_rule(support, zz, ang, n_r)
        T = source(zz - r[..., None] * ang[:, None, :])
        if support.contains(zz):
            Tz = source(zz[None])[0]
            integ = np.einsum("ab,abkl->akl", wr / r, T - Tz)
            integ += np.log(r_out)[:, None, None] * Tz
        else:
            integ = np.einsum("ab,abkl->akl", wr / np.where(r > 0, r, 1.0), T)
        out[n] = np.einsum("a,aikjl,akl->ij", wa, H, integ)
    return out


class CorrectedFlow(FlowField):
    """``u_phi = u + phi u_diff`` with ``u_diff = grad G : (V Du)`` convolved.

    ``u_diff(z) = int d_l G_ik(z - x) T_kl(x) dx`` with ``T = V Du``.  The
    velocity uses a spherical rule centred at ``z`` on which the kernel
    times ``r^2`` is bounded.  The gradient is the principal-value
    convolution with the second derivatives plus the delta part
    ``-T(z)/5``; ``gradient_fd`` differentiates the velocity instead.
    """
    provenance = "corrected"

    def __init__(self, u: FlowField, V: ViscosityField, phi, n_r=24, n_theta=24, n_phi=48):
        if phi < 0:
            raise ValueError("phi must be nonnegative")
        if V.support is None:
            raise ValueError("viscosity field needs a compact support for the quadrature")
        self.u = u
        self.V = V
        self.phi = float(phi)
        self.rule = (n_r, n_theta, n_phi)
        self.ang, self.wa = kernels.sphere_rule(n_theta, n_phi)
        self._dG = kernels.oseen_grad(self.ang)
        self._hess = None

    def source(self, x):
        x = np.asarray(x, float)
        return self.V.apply(x, self.u.strain(x))

    def _rays(self, z):
        return ray_rule(self.V.support, z, self.ang, self.rule[0])

    def u_diff(self, z):
        z = np.atleast_2d(np.asarray(z, float))
        out = np.zeros(z.shape)
        for n, zz in enumerate(z):
            r, wr, _, _ = self._rays(zz)
            T = self.source(zz - r[..., None] * self.ang[:, None, :])
            # d G(r w) r^2 = d G(w)
            out[n] = np.einsum("a,aikl,ab,abkl->i", self.wa, self._dG, wr, T)
        return out

    def grad_diff(self, z):
        """Principal value plus delta part of ``grad u_diff``."""
        z = np.atleast_2d(np.asarray(z, float))
        if self._hess is None:
            self._hess = kernels.oseen_hess(self.ang)
        pv = pv_hess_convolution(self.source, self.V.support, z, self.ang, self.wa,
                                 self.rule[0], hess=self._hess)
        return pv + _local_term(self.source(z))

    def gradient_fd(self, z, step=1e-2):
        """Fourth-order central differences of ``u_diff``, scaled by ``phi``."""
        z = np.atleast_2d(np.asarray(z, float))
        g = np.zeros(z.shape + (3,))
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            f = [self.u_diff(z + k * e) for k in (-2, -1, 1, 2)]
            g[..., j] = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * step)
        return self.u.gradient(z) + self.phi * g

    def velocity(self, x):
        x = np.asarray(x, float)
        shape = x.shape
        out = self.u.velocity(x)
        if self.phi == 0.0:
            return out
        return out + self.phi * self.u_diff(x.reshape(-1, 3)).reshape(shape)

    def gradient(self, x):
        x = np.asarray(x, float)
        shape = x.shape
        out = self.u.gradient(x)
        if self.phi == 0.0:
            return out
        return out + self.phi * self.grad_diff(x.reshape(-1, 3)).reshape(shape + (3,))


def corrected_flow(u: FlowField, V: ViscosityField, phi, **rule) -> CorrectedFlow:
    return CorrectedFlow(u, V, phi, **rule)


# --- flow maps -----------------------------------------------------------

@dataclass
class FlowMaps:
    """Zero-order characteristics ``Phi``, ``Xi`` and ``grad Phi`` of a steady flow.

    Integrated on demand with fixed-step RK4 and unit renormalization of the
    orientation after each step.  Negative times integrate backwards.
    """
    u: FlowField
    shape: ParticleShape
    T: float
    dt: float
    tol: float = None
    stats: dict = field(default_factory=dict)

    def _rhs(self, X, xi, F):
        g = self.u.gradient(X)
        return self.u.velocity(X), mobility_apply(self.shape, xi, g), g @ F

    def _rk4(self, X, xi, F, h):
        k1 = self._rhs(X, xi, F)
        k2 = self._rhs(X + 0.5 * h * k1[0], _renorm(xi + 0.5 * h * k1[1]), F + 0.5 * h * k1[2])
        k3 = self._rhs(X + 0.5 * h * k2[0], _renorm(xi + 0.5 * h * k2[1]), F + 0.5 * h * k2[2])
        k4 = self._rhs(X + h * k3[0], _renorm(xi + h * k3[1]), F + h * k3[2])
        comb = lambda i: (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0
        return X + h * comb(0), xi + h * comb(1), F + h * comb(2)

    def evaluate(self, t, x, xi0=None):
        """Return ``(Phi(t, x), Xi(t, x, xi0), grad Phi(t, x))``."""
        x = np.atleast_2d(np.asarray(x, float))
        xi = np.tile([0.0, 0.0, 1.0], (len(x), 1)) if xi0 is None else np.atleast_2d(np.asarray(xi0, float))
        xi = np.broadcast_to(xi, x.shape).copy()
        F = np.broadcast_to(np.eye(3), x.shape + (3,)).copy()
        n = int(np.ceil(abs(t) / self.dt - 1e-9))
        if n == 0:
            return x.copy(), xi, F
        h = t / n
        drift = 0.0
        for _ in range(n):
            if self.tol is not None:
                big = self._rk4(x, xi, F, h)
                half = self._rk4(*self._rk4(x, xi, F, 0.5 * h), 0.5 * h)
                err = np.abs(big[0] - half[0]).max() / 15.0
                if err > self.tol:
                    raise RuntimeError(f"flow map step rejected: local error {err:.2e} > {self.tol:.0e}")
            x, xi, F = self._rk4(x, xi, F, h)
            drift = max(drift, float(np.abs(np.linalg.norm(xi, axis=1) - 1.0).max()))
            xi = _renorm(xi)
        self.stats["max_unit_drift"] = drift
        return x, xi, F

    def phi_map(self, t, x):
        return self.evaluate(t, x)[0]

    def xi_map(self, t, x, xi0):
        return self.evaluate(t, x, xi0)[1]

    def grad_phi(self, t, x):
        return self.evaluate(t, x)[2]

    def inverse(self, t, z):
        """Lagrangian label ``x`` with ``Phi(t, x) = z``."""
        return self.evaluate(-t, z)[0]


def _renorm(xi):
    return xi / np.linalg.norm(xi, axis=-1, keepdims=True)


def flow_maps(u: FlowField, shape: ParticleShape, T, dt, tol=None) -> FlowMaps:
    if not dt > 0:
        raise ValueError("dt must be positive")
    return FlowMaps(u, shape, float(T), float(dt), tol)
