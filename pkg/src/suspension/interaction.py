"""Singular pair functional, its regularized energy form, and the limit formula.

``I^N = (1/N^2) sum_{i != j} Psi_1(X_i, xi_i) : (hess G(X_i - X_j) Psi_2(X_j, xi_j))``
where ``hess G(x) B`` is the gradient of the dipole field ``h[B]``.

The limit is a principal-value mean-field integral plus a correlation term
``(1 / (lambda^2 |O|)) E[Psi_1 : C(grad Phi) Psi2bar]`` with
``C(M) B = int (n2(y) - lambda^2) hess G(M y) B dy``, the integral taken as
a principal value over balls in ``z = M y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .fields import Ellipsoid, pv_hess_convolution
from .particle import ParticleShape, mobility_apply, stresslet_apply


# --- pair functionals ----------------------------------------------------

@dataclass
class PairFunctionalSpec:
    """``psi(x, xi)`` maps ``(n, 3), (n, 3) -> (n, 3, 3)`` tracefree."""
    psi1: object
    psi2: object
    support1: Ellipsoid = None
    support2: Ellipsoid = None


def constant_spec(A, B=None):
    A = kernels.check_tracefree(np.asarray(A, float))
    B = A if B is None else kernels.check_tracefree(np.asarray(B, float))
    f = lambda M: (lambda x, xi: np.broadcast_to(M, np.shape(x)[:-1] + (3, 3)).copy())
    return PairFunctionalSpec(f(A), f(B))


def _psis(X, xi, spec):
    return np.asarray(spec.psi1(X, xi), float), np.asarray(spec.psi2(X, xi), float)


def pair_sum(X1, P1, X2, P2, exclude_self=True, delta=0.0, w1=None, w2=None, chunk=1024):
    """``sum_{a, b} w1_a w2_b P1_a : hess G(X1_a - X2_b) P2_b`` over ``|X1_a - X2_b| > delta``."""
    X1, X2 = np.asarray(X1, float), np.asarray(X2, float)
    w1 = np.ones(len(X1)) if w1 is None else np.asarray(w1, float)
    w2 = np.ones(len(X2)) if w2 is None else np.asarray(w2, float)
    total = 0.0
    for s in range(0, len(X1), chunk):
        d = X1[s:s + chunk, None, :] - X2[None, :, :]
        r = np.linalg.norm(d, axis=-1)
        keep = r > delta
        if exclude_self:
            keep &= r > 0
        elif np.any(r == 0):
            raise ValueError("coincident positions in pair sum")
        a, b = np.nonzero(keep)
        if len(a) == 0:
            continue
        v = kernels.hess_contract(d[a, b], P1[s:s + chunk][a], P2[b])
        total += float(np.sum(w1[s:s + chunk][a] * w2[b] * v))
    return total


def double_sum(X, xi, spec: PairFunctionalSpec, chunk=1024):
    """``I^N`` by exact O(N^2) evaluation."""
    X = np.atleast_2d(np.asarray(X, float))
    xi = np.atleast_2d(np.asarray(xi, float))
    N = len(X)
    if N >= 2:
        d = np.linalg.norm(X[:, None] - X[None], axis=-1) + np.eye(N)
        if np.any(d == 0):
            raise ValueError("coincident positions in double sum")
    P1, P2 = _psis(X, xi, spec)
    return pair_sum(X, P1, X, P2, True, 0.0, chunk=chunk) / N**2


def support_bound(X, xi, spec: PairFunctionalSpec):
    """Right-hand side shape of the uniform bound: support fractions and sup norms."""
    P1, P2 = _psis(X, xi, spec)
    N = len(X)
    n1 = np.count_nonzero(np.abs(P1).max(axis=(1, 2)) > 0)
    n2 = np.count_nonzero(np.abs(P2).max(axis=(1, 2)) > 0)
    s1 = np.linalg.norm(P1, axis=(1, 2)).max(initial=0.0)
    s2 = np.linalg.norm(P2, axis=(1, 2)).max(initial=0.0)
    return np.sqrt(n1 / N * n2 / N) * s1 * s2


# --- regularized energy --------------------------------------------------

@dataclass
class EnergyQuadrature:
    """Spherical quadrature about every particle, blended by a Shepard partition.

    Radial Gauss rule inside the regularization ball, geometric panels
    outside up to ``r_max_factor`` times the configuration diameter, and an
    analytic tail from the ``r^-6`` decay of the energy density.
    """
    eta: float
    n_ball: int = 6
    n_panel: int = 6
    n_theta: int = 12
    n_phi: int = 24
    shepard_power: int = 8
    r_max_factor: float = 20.0


@dataclass
class EnergyResult:
    value: float
    field_term: float
    self_term: float
    tail: float
    eta: float
    nodes: int


def eta_bound(X):
    """Largest admissible ``eta = (c/4) N^(-1/3)`` with ``c = d_min N^(1/3)``."""
    X = np.atleast_2d(np.asarray(X, float))
    if len(X) < 2:
        return np.inf
    d = np.linalg.norm(X[:, None] - X[None], axis=-1) + np.diag(np.full(len(X), np.inf))
    return d.min() / 4.0


def _radial_nodes(eta, R, n_ball, n_panel):
    g, w = np.polynomial.legendre.leggauss(n_ball)
    r = [0.5 * eta * (g + 1.0)]
    wr = [0.5 * eta * w]
    g, w = np.polynomial.legendre.leggauss(n_panel)
    a = eta
    while a < R:
        b = min(2.0 * a, R)
        r.append(a + 0.5 * (b - a) * (g + 1.0))
        wr.append(0.5 * (b - a) * w)
        a = b
    return np.concatenate(r), np.concatenate(wr)


def _field_products(pts, X, P1, P2, eta):
    """Summed gradients of the smeared dipoles and the sum of their diagonal products."""
    d = pts[:, None, :] - X[None]
    r = np.linalg.norm(d, axis=-1)
    inside = r <= eta
    dd = np.where(inside[..., None], eta, 0.0) + d  # placeholder shift keeps the far kernel finite
    g1 = kernels.oseen_hess_apply(dd, np.broadcast_to(P1, d.shape[:2] + (3, 3)))
    g2 = kernels.oseen_hess_apply(dd, np.broadcast_to(P2, d.shape[:2] + (3, 3)))
    for j in np.nonzero(inside.any(0))[0]:
        m = inside[:, j]
        g1[m, j] = kernels.grad_h_eta(P1[j], eta, d[m, j])
        g2[m, j] = kernels.grad_h_eta(P2[j], eta, d[m, j])
    diag = np.einsum("njab,njab->n", g1, g2)
    return g1.sum(1), g2.sum(1), diag


def regularized_energy_terms(X, xi, spec: PairFunctionalSpec, quad: EnergyQuadrature) -> EnergyResult:
    """``-int grad h^{N,eta}[Psi_1] : grad h^{N,eta}[Psi_2] + sum_i (self energies)``.

    The cross part of the field energy (all products ``i != j``) is integrated
    pointwise, the self energies are exact.  Both together give the value.
    """
    X = np.atleast_2d(np.asarray(X, float))
    xi = np.atleast_2d(np.asarray(xi, float))
    N = len(X)
    eta = float(quad.eta)
    bound = eta_bound(X)
    if eta > bound * (1.0 + 1e-12):
        raise ValueError(f"eta = {eta:.4g} exceeds the admissible bound (c/4) N^(-1/3) = {bound:.4g}")
    P1, P2 = _psis(X, xi, spec)
    self_term = sum(kernels.self_energy(P1[i], P2[i], eta) for i in range(N)) / N**2
    if N == 1:
        return EnergyResult(0.0, -self_term, self_term, 0.0, eta, 0)
    diam = np.linalg.norm(X[:, None] - X[None], axis=-1).max()
    R = quad.r_max_factor * max(diam, eta)
    rr, wr = _radial_nodes(eta, R, quad.n_ball, quad.n_panel)
    ang, wa = kernels.sphere_rule(quad.n_theta, quad.n_phi)
    p = quad.shepard_power
    cross = 0.0
    tail = 0.0
    for i in range(N):
        pts = X[i] + (rr[:, None, None] * ang[None]).reshape(-1, 3)
        far = X[i] + R * ang
        allp = np.concatenate([pts, far])
        dist = np.linalg.norm(allp[:, None, :] - X[None], axis=-1)
        # Shepard weight of centre i, evaluated stably relative to the nearest centre
        ratio = (dist.min(1, keepdims=True) / np.maximum(dist, 1e-300)) ** p
        shep = ratio[:, i] / ratio.sum(1)
        G1, G2, diag = _field_products(allp, X, P1, P2, eta)
        G1, G2 = G1 / N, G2 / N
        diag = diag / N**2
        F = (np.einsum("nij,nij->n", G1, G2) - diag) * shep
        m = len(pts)
        w = (wr[:, None] * rr[:, None] ** 2 * wa[None]).ravel()
        cross += float(np.sum(w * F[:m]))
        tail += float(np.sum(wa * F[m:]) * R**3 / 3.0)
    field_term = -(cross + tail) - self_term
    return EnergyResult(field_term + self_term, field_term, self_term, -tail, eta, N * (len(rr) + 1) * len(wa))


def regularized_energy(X, xi, spec: PairFunctionalSpec, quad: EnergyQuadrature):
    return regularized_energy_terms(X, xi, spec, quad).value


# --- mean-field term -----------------------------------------------------

def mark_average(psi, mark_law, n_theta=12, n_phi=24):
    """``x -> int psi(x, xi) kappa(d xi)`` by a fixed spherical rule."""
    nodes, w = mark_law.quadrature(n_theta, n_phi)

    def avg(x):
        x = np.asarray(x, float)
        flat = x.reshape(-1, 3)
        n, q = len(flat), len(w)
        vals = psi(np.repeat(flat, q, axis=0), np.tile(nodes, (n, 1))).reshape(n, q, 3, 3)
        return np.einsum("q,nqij->nij", w, vals).reshape(x.shape[:-1] + (3, 3))
    return avg


def meanfield_continuum(psi1_bar, support1: Ellipsoid, psi2_bar, support2: Ellipsoid,
                        outer=(8, 8, 16), inner=(24, 24, 48)):
    """``int int psi1(x) : PV hess G(x - y) psi2(y) dy dx`` for compactly supported fields.

    Outer integral by a Gauss rule on ``support1``; inner principal value by
    rays about ``x`` cut at the boundary of ``support2``.
    """
    xq, wq = support1.quadrature(*outer)
    ang, wa = kernels.sphere_rule(inner[1], inner[2])
    H = kernels.oseen_hess(ang)
    inner_vals = pv_hess_convolution(psi2_bar, support2, xq, ang, wa, inner[0], hess=H)
    p1 = psi1_bar(xq)
    return float(np.einsum("q,qij,qij->", wq, p1, inner_vals))


def meanfield_ensemble(x, xi, w, spec: PairFunctionalSpec, delta):
    """Weighted pair sum with the symmetric shell ``|x_a - x_b| <= delta`` removed.

    Returns the value at ``delta`` and at ``delta / 2`` with their relative gap.
    """
    x = np.asarray(x, float)
    P1, P2 = _psis(x, xi, spec)
    v = pair_sum(x, P1, x, P2, True, delta, w, w)
    vh = pair_sum(x, P1, x, P2, True, 0.5 * delta, w, w)
    return v, vh, abs(v - vh) / max(abs(v), 1e-300)


# --- correlation kernels -------------------------------------------------

def _sym0_basis():
    from .fields import _sym0_basis as b
    return b()


def _as_tensor(apply_fn):
    """Fourth-order tensor of a linear map given on the full matrix space."""
    out = np.zeros((3, 3, 3, 3))
    for k in range(3):
        for l in range(3):
            E = np.zeros((3, 3))
            E[k, l] = 1.0
            out[:, :, k, l] = apply_fn(E)
    return out


def _hess_on_sphere(points, B):
    return kernels.oseen_hess_apply(points, np.broadcast_to(B, points.shape[:-1] + (3, 3)))


def isotropic_C(corr, M, test=0, n_theta=32, n_phi=64):
    """``C(M)`` for an isotropic table by its one-dimensional radial reduction.

    ``C(M) B = L A(M) B + (lambda^2 / det M) int_S2 hess G(w) B log|M^-1 w| dw``
    with ``L`` the log-moment of the table and ``A(M) B`` the angular mean of
    ``hess G(M w) B`` over the unit sphere (zero for unimodular ``M``, kept
    for completeness).
    """
    M = np.asarray(M, float)
    ang, wa = kernels.sphere_rule(n_theta, n_phi)
    Minv = np.linalg.inv(M)
    logs = np.log(np.linalg.norm(ang @ Minv.T, axis=1))
    L = corr.log_moment(test)
    lam2 = corr.lam**2
    det = np.linalg.det(M)
    Mw = ang @ M.T

    def apply(B):
        a = np.einsum("q,qij->ij", wa, _hess_on_sphere(Mw, B))
        b = np.einsum("q,q,qij->ij", wa, logs, _hess_on_sphere(ang, B))
        return L * a + lam2 / det * b
    return _as_tensor(apply)


def isotropic_C_direct(corr, M, test=0, n_theta=24, n_phi=48, n_r=4, rho=1e-6):
    """``C(M)`` by three-dimensional quadrature in ``y``, no homogeneity used.

    Shells ``c' <= |y| <= r_max`` carry the tabulated values, the interior
    ``|y| < c'`` carries ``-lambda^2`` and is cut at ``|M y| = rho``; every
    radial panel is integrated with Gauss nodes evaluating ``hess G(M y)``.
    """
    M = np.asarray(M, float)
    ang, wa = kernels.sphere_rule(n_theta, n_phi)
    Mw = ang @ M.T
    g, gw = np.polynomial.legendre.leggauss(n_r)
    cp = corr.c_prime
    edges = np.asarray(corr.edges, float)
    vals = corr.values[:, test]
    lam2 = corr.lam**2
    panels = []
    for a, b, v in zip(edges[:-1], edges[1:], vals):
        a, b = max(a, cp), max(b, cp)
        if b > a and v != 0.0:
            panels.append((np.full(len(ang), a), np.full(len(ang), b), v))
    # interior: from |M y| = rho to |y| = c', geometric panels per direction
    lo = rho / np.linalg.norm(Mw, axis=1)
    n_geo = int(np.ceil(np.log2(cp / lo.min()))) + 1
    edges_in = lo[:, None] * (cp / lo[:, None]) ** (np.arange(n_geo + 1) / n_geo)
    for k in range(n_geo):
        panels.append((edges_in[:, k], edges_in[:, k + 1], -lam2))

    def apply(B):
        tot = np.zeros((3, 3))
        for a, b, v in panels:
            r = a[:, None] + 0.5 * (b - a)[:, None] * (g + 1.0)[None]
            w = 0.5 * (b - a)[:, None] * gw[None] * r**2
            H = _hess_on_sphere(r[..., None] * Mw[:, None, :], B)
            tot += v * np.einsum("a,ab,abij->ij", wa, w, H)
        return tot
    return _as_tensor(apply)


def _face_rule(M, n):
    """Directions and solid-angle weights from the faces of ``M [-1, 1]^3``."""
    # Gauss on each half of [-1, 1]: the jitter density has a kink at 0
    g, w = np.polynomial.legendre.leggauss(n)
    g = np.concatenate([(g - 1.0) / 2.0, (g + 1.0) / 2.0])
    w = np.concatenate([w, w]) / 2.0
    n = len(g)
    S, T = np.meshgrid(g, g, indexing="ij")
    W = (w[:, None] * w[None, :]).ravel()
    us, ws = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u = np.zeros((n * n, 3))
            others = [a for a in range(3) if a != axis]
            u[:, axis] = sign
            u[:, others[0]] = S.ravel()
            u[:, others[1]] = T.ravel()
            us.append(u)
            ws.append(W)
    u = np.concatenate(us)
    w = np.concatenate(ws)
    Mu = u @ M.T
    nrm = np.linalg.norm(Mu, axis=1)
    return u, Mu / nrm[:, None], w * abs(np.linalg.det(M)) / nrm**3, nrm


def _jitter_origin_term(lat, M, B, n_face=24):
    """``PV int p(y) hess G(M y) B dy`` for the triangular jitter-difference density ``p``."""
    M = np.asarray(M, float)
    J = lat.jitter
    if J == 0:
        return np.zeros((3, 3))
    # directions w = M u / |M u| with u on the cube faces; along z = r w
    # the jitter argument is y = r u / |M u|, so the support ends at 2 J |M u|
    u, omega, w, nrm = _face_rule(M, n_face)
    v = np.abs(u) / nrm[:, None]            # |y_a| per unit r
    r_e = 2.0 * J / v.max(1)
    # p(r v) = prod_a (2J - r v_a) / (4 J^2): cubic in r
    c = np.ones((len(v), 1))
    for a in range(3):
        c = np.concatenate([c * 2.0 * J, np.zeros((len(v), 1))], 1) - \
            np.concatenate([np.zeros((len(v), 1)), c * v[:, a:a + 1]], 1)
    c = c / (4.0 * J * J) ** 3
    p0 = c[:, 0]
    radial = sum(c[:, m] * r_e**m / m for m in range(1, 4)) + p0 * np.log(r_e)
    H = _hess_on_sphere(omega, B)
    return np.einsum("q,q,qij->ij", w, radial, H) / abs(np.linalg.det(M))


def _local_map(B):
    """Delta part of ``grad (grad G : B)``: ``int_S2 h[B](w) (x) w dw``."""
    Bt = np.swapaxes(B, -1, -2)
    return -(B + Bt) / 10.0 - (B - Bt) / 6.0


def _fourier_symbol(kappa, B):
    """Fourier multiplier of ``B -> hess G * B``: ``-((I - k k) B k) (x) k``."""
    kh = kappa / np.linalg.norm(kappa, axis=-1, keepdims=True)
    Bk = np.einsum("ij,...j->...i", B, kh)
    proj = Bk - np.einsum("...i,...i->...", kh, Bk)[..., None] * kh
    return -proj[..., :, None] * kh[..., None, :]


def lattice_C(lat, M, Q=40, n_face=12):
    """``C(M)`` of the jittered lattice by reciprocal-lattice summation.

    ``C(M) B = lambda [s^-3 sum_{q != 0} phat(2 pi q / s) m(M^-T q) B / det M - PV int p hess G(M y) B dy]``
    with ``phat`` the product of ``sinc^2`` factors.  Partial sums over the
    cube ``|q|_inf <= Q`` have a tail ``a/Q + b/Q^2``, removed using ``Q / 4``,
    ``Q / 2`` and ``Q``.
    """
    M = np.asarray(M, float)
    s, J = lat.spacing, lat.jitter
    Minv_t = np.linalg.inv(M).T
    det = abs(np.linalg.det(M))

    q1_all = np.arange(-Q, Q + 1)

    def sinc2(q):
        if J == 0:
            return np.ones(len(q))
        x = 2.0 * np.pi * J * q / s
        safe = np.where(q == 0, 1.0, x)
        return np.where(q == 0, 1.0, np.sin(safe) ** 2 / safe**2)

    def partial(Qm):
        q1 = q1_all[np.abs(q1_all) <= Qm]
        s2 = sinc2(q1)
        Q2, Q3 = np.meshgrid(q1, q1, indexing="ij")
        tot = np.zeros((3, 3, 3, 3))
        for a in range(len(q1)):
            q = np.stack([np.full(Q2.size, q1[a]), Q2.ravel(), Q3.ravel()], 1).astype(float)
            wts = s2[a] * (s2[:, None] * s2[None, :]).ravel()
            keep = np.any(q != 0, axis=1)
            k = q[keep] @ Minv_t.T
            kh = k / np.linalg.norm(k, axis=1, keepdims=True)
            proj = np.eye(3) - kh[:, :, None] * kh[:, None, :]
            # symbol: (m B)_ij = -(I - k k)_ik B_kl k_l k_j
            tot -= np.einsum("n,nik,nl,nj->ijkl", wts[keep], proj, kh, kh, optimize=True)
        return tot / (s**3 * det)

    if Q % 4:
        raise ValueError("Q must be a multiple of 4")
    recip = (8.0 * partial(Q) - 6.0 * partial(Q // 2) + partial(Q // 4)) / 3.0
    # the ball principal value has symbol m - L with L the delta part; its
    # sum over q != 0 against phat is (p(0) - s^-3) L
    p0 = 1.0 / (8.0 * J**3) if J > 0 else np.inf
    recip -= (p0 - s**-3) / det * _as_tensor(_local_map)
    origin = _as_tensor(lambda B: _jitter_origin_term(lat, M, B, n_face))
    return lat.lam * (recip - origin)


def lattice_C_direct(lat, M, R=4.0, n_gauss=4):
    """``C(M)`` of the jittered lattice by direct summation with a Gaussian cutoff.

    ``lambda sum_{k != 0} int p(y - s k) hess G(M y) B exp(-|M y|^2 / (R s)^2) dy``;
    the cutoff error is ``O(R^-2)``, removed by Richardson from ``R`` and ``2 R``.
    """
    M = np.asarray(M, float)
    s, J = lat.spacing, lat.jitter
    g, gw = np.polynomial.legendre.leggauss(n_gauss)
    # triangular density on [-2J, 2J]: two linear pieces
    if J > 0:
        t = np.concatenate([-2.0 * J + J * (g + 1.0), J * (g + 1.0)])
        wt = np.concatenate([J * gw * (2.0 * J - np.abs(-2.0 * J + J * (g + 1.0))),
                             J * gw * (2.0 * J - np.abs(J * (g + 1.0)))]) / (4.0 * J * J)
    else:
        t, wt = np.zeros(1), np.ones(1)
    off = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
    woff = (wt[:, None, None] * wt[None, :, None] * wt[None, None, :]).ravel()

    smin = np.linalg.svd(M, compute_uv=False).min()

    def partial(Rc):
        K = int(np.ceil((4.5 * Rc * s + 4.0 * J) / (smin * s))) + 1
        k1 = np.arange(-K, K + 1)
        Q2, Q3 = np.meshgrid(k1, k1, indexing="ij")
        tot = np.zeros((3, 3, 3, 3))
        for a in k1:
            k = np.stack([np.full(Q2.size, a), Q2.ravel(), Q3.ravel()], 1).astype(float)
            k = k[np.any(k != 0, axis=1)]
            zc = np.linalg.norm((s * k) @ M.T, axis=1)
            k = k[zc < 4.5 * Rc * s + 4.0 * J]
            if len(k) == 0:
                continue
            z = ((s * k)[:, None, :] + off[None]) @ M.T
            cut = np.exp(-(np.linalg.norm(z, axis=-1) / (Rc * s)) ** 2) * woff
            H = kernels.oseen_hess(z.reshape(-1, 3))
            tot += np.einsum("n,nikjl->ijkl", cut.ravel(), H)
        return lat.lam * tot

    return (4.0 * partial(2.0 * R) - partial(R)) / 3.0


def correlation_matrix(corr, M, method="reduced", **kw):
    """Dispatch ``C(M)`` for a radial table or an exact lattice correlation."""
    from .pointproc import LatticeCorrelation
    if corr is None:
        return np.zeros((3, 3, 3, 3))
    if isinstance(corr, LatticeCorrelation):
        return lattice_C(corr, M, **kw) if method == "reduced" else lattice_C_direct(corr, M, **kw)
    if getattr(corr, "correlated_marks", False):
        raise ValueError("correlated-marks tables need the general weak-form path")
    return isotropic_C(corr, M, **kw) if method == "reduced" else isotropic_C_direct(corr, M, **kw)


def _apply4(C, B):
    return np.einsum("ijkl,...kl->...ij", C, B)


# --- limit formula -------------------------------------------------------

@dataclass
class LimitFormulaResult:
    meanfield_term: float
    correlation_term: float
    total: float
    diagnostics: dict = field(default_factory=dict)


def _labels(f_t):
    x0 = getattr(f_t, "x0", None)
    xi0 = getattr(f_t, "xi0", None)
    return (f_t.x if x0 is None else x0), (f_t.xi if xi0 is None else xi0)


def correlation_term(f_t, corr, flowmaps, spec: PairFunctionalSpec, mark_law, domain_volume,
                     t=0.0, method="direct", n_theta=8, n_phi=16, C_cache=None):
    """``(1 / (lambda^2 |O|)) sum_a w_a Psi_1(x_a, xi_a) : C(grad Phi(x0_a)) Psi2bar_a``.

    ``Psi2bar_a`` averages ``Psi_2(x_a, Xi(t, x0_a, xi))`` over the initial
    mark law; ``C`` is evaluated once per distinct ``grad Phi`` (rounded).
    """
    if corr is None:
        return 0.0
    x0, _ = _labels(f_t)
    x0 = np.atleast_2d(x0)
    x, xi, w = np.atleast_2d(f_t.x), np.atleast_2d(f_t.xi), np.asarray(f_t.w, float)
    nodes, wq = mark_law.quadrature(n_theta, n_phi)
    n, q = len(x0), len(wq)
    if flowmaps is None or t == 0:
        F = np.broadcast_to(np.eye(3), (n, 3, 3))
        Xi = np.tile(nodes, (n, 1))
    else:
        _, Xi, _ = flowmaps.evaluate(t, np.repeat(x0, q, axis=0), np.tile(nodes, (n, 1)))
        F = flowmaps.evaluate(t, x0)[2]
    P2 = np.asarray(spec.psi2(np.repeat(x, q, axis=0), Xi), float).reshape(n, q, 3, 3)
    P2bar = np.einsum("q,nqij->nij", wq, P2)
    P1 = np.asarray(spec.psi1(x, xi), float)
    cache = {} if C_cache is None else C_cache
    keys = [tuple(np.round(Fa, 10).ravel()) for Fa in F]
    total = 0.0
    for key in set(keys):
        if key not in cache:
            cache[key] = correlation_matrix(corr, np.array(key).reshape(3, 3), method=method)
        idx = [a for a, kk in enumerate(keys) if kk == key]
        CP = _apply4(cache[key], P2bar[idx])
        total += float(np.einsum("a,aij,aij->", w[idx], P1[idx], CP))
    return total / (corr.lam**2 * domain_volume)


def limit_formula(f_t, corr, flowmaps, spec: PairFunctionalSpec, mark_law, domain_volume,
                  t=0.0, delta=None, pv_tol=1e-3, continuum=None, method="direct"):
    """Mean-field plus correlation terms of the limit of the pair functional.

    With ``continuum = (psi1_bar, support1, psi2_bar, support2)`` the
    mean-field term is the deterministic principal-value integral; otherwise
    it is the ensemble pair sum with symmetric-shell exclusion ``delta``,
    whose sensitivity to halving ``delta`` is monitored against ``pv_tol``.
    """
    diag = {}
    if continuum is not None:
        mf = meanfield_continuum(*continuum)
        diag["meanfield_route"] = "continuum"
    else:
        if delta is None:
            raise ValueError("ensemble mean-field needs an exclusion radius delta")
        mf, mf_half, rel = meanfield_ensemble(f_t.x, f_t.xi, f_t.w, spec, delta)
        diag.update(meanfield_route="ensemble", delta=delta, meanfield_half_delta=mf_half, pv_rel_change=rel)
        if rel > pv_tol:
            diag["pv_warning"] = f"meanfield changed by {rel:.2e} when delta was halved"
    ct = correlation_term(f_t, corr, flowmaps, spec, mark_law, domain_volume, t, method) if corr is not None else 0.0
    return LimitFormulaResult(mf, ct, mf + ct, diag)


# --- the B field ---------------------------------------------------------

class BField:
    """``B(t, x) = (1 / (lambda^2 |O|)) C(grad Phi(t, x0)) (Sbar_t(x) Du(x))``, ``x0 = Phi^-1(t, x)``.

    ``Sbar_t(x)`` is the mean stresslet over the pushed-forward marks
    ``Xi(t, x0, .) # kappa``.  Independent of ``xi`` (uncorrelated marks).
    """

    def __init__(self, corr, u, flowmaps, shape: ParticleShape, t, mark_law, domain_volume,
                 n_theta=8, n_phi=16):
        if getattr(corr, "correlated_marks", False):
            raise ValueError("pointwise B needs an uncorrelated-marks table")
        self.corr, self.u, self.maps, self.shape = corr, u, flowmaps, shape
        self.t = float(t)
        self.mark_law = mark_law
        self.vol = float(domain_volume)
        self.rule = (n_theta, n_phi)
        self._C = {}

    def _C_of(self, F):
        key = tuple(np.round(F, 10).ravel())
        if key not in self._C:
            self._C[key] = correlation_matrix(self.corr, F, method="reduced")
        return self._C[key]

    def __call__(self, x, xi=None):
        x = np.atleast_2d(np.asarray(x, float))
        n = len(x)
        if self.corr is None:
            return np.zeros((n, 3, 3))
        nodes, wq = self.mark_law.quadrature(*self.rule)
        q = len(wq)
        if self.maps is None or self.t == 0:
            x0 = x
            F = np.broadcast_to(np.eye(3), (n, 3, 3))
            Xi = np.tile(nodes, (n, 1))
        else:
            x0 = self.maps.inverse(self.t, x)
            F = self.maps.evaluate(self.t, x0)[2]
            Xi = self.maps.evaluate(self.t, np.repeat(x0, q, axis=0), np.tile(nodes, (n, 1)))[1]
        E = self.u.strain(x)
        S = stresslet_apply(self.shape, Xi, np.repeat(E, q, axis=0)).reshape(n, q, 3, 3)
        SE = np.einsum("q,nqij->nij", wq, S)
        out = np.zeros((n, 3, 3))
        for a in range(n):
            out[a] = _apply4(self._C_of(F[a]), SE[a])
        if not np.all(np.isfinite(out)):
            bad = int(np.nonzero(~np.isfinite(out).all(axis=(1, 2)))[0][0])
            raise ValueError(f"B undefined at sample {bad}")
        return out / (self.corr.lam**2 * self.vol)


def compute_B(corr, u, flowmaps, shape: ParticleShape, t, mark_law, domain_volume=1.0) -> BField:
    return BField(corr, u, flowmaps, shape, t, mark_law, domain_volume)


def b_pairing(f_t, B: BField, grad_xi_phi, shape: ParticleShape):
    """``sum_a w_a grad_xi phi(x_a, xi_a) . (M(xi_a) B(x_a) xi_a)``."""
    x, xi, w = np.atleast_2d(f_t.x), np.atleast_2d(f_t.xi), np.asarray(f_t.w, float)
    Bx = B(x, xi)
    rot = mobility_apply(shape, xi, Bx)
    return float(np.einsum("a,ai,ai->", w, grad_xi_phi(x, xi), rot))


# --- consistency with the corrected flow --------------------------------

def tangential(xi, v):
    return v - np.einsum("...i,...i->...", xi, v)[..., None] * xi


def corrected_flow_pairing(density, cflow, grad_xi_phi, shape: ParticleShape, support: Ellipsoid,
                           rule=(8, 8, 16), marks=(8, 16), fd_step=2e-2):
    """``(1/phi) int grad_xi phi . M (grad (u_phi - u)) xi f`` for a product density.

    ``grad (u_phi - u)`` comes from finite differences of the convolved
    velocity, independent of the principal-value route.
    """
    xq, wq = support.quadrature(*rule)
    G = (cflow.gradient_fd(xq, step=fd_step) - cflow.u.gradient(xq)) / cflow.phi
    # the convolved velocity is divergence free only up to quadrature error
    tr = np.trace(G, axis1=1, axis2=2)
    corrected_flow_pairing.last_trace = float(np.abs(tr).max() / max(np.abs(G).max(), 1e-300))
    G = G - tr[:, None, None] * np.eye(3) / 3.0
    nodes, wm = density.mark_law.quadrature(*marks)
    n, q = len(xq), len(wm)
    X = np.repeat(xq, q, axis=0)
    XI = np.tile(nodes, (n, 1))
    rot = mobility_apply(shape, XI, np.repeat(G, q, axis=0))
    vals = np.einsum("ni,ni->n", grad_xi_phi(X, XI), rot).reshape(n, q)
    return float(np.einsum("n,n,nq,q->", wq, density.rho(xq), vals, wm))
