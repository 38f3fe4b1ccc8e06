"""Stokes kernels in free space and the smeared dipole regularization.

All fields take points with shape (..., 3) and broadcast over the leading
axes.  Matrix arguments broadcast the same way with shape (..., 3, 3).
The dipole convention throughout is ``h[A]_i = A_kl d_l G_ik``, so that the
gradient of ``h[A]`` is ``oseen_hess_apply(x, A)``.
"""
from __future__ import annotations

import functools
import itertools

import numpy as np

EIGHT_PI = 8.0 * np.pi
TRACE_TOL = 1e-10


def _norm(x):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("kernel evaluated at the origin")
    return x, r


def check_tracefree(A, tol=TRACE_TOL):
    A = np.asarray(A, dtype=float)
    tr = np.trace(A, axis1=-2, axis2=-1)
    scale = np.maximum(1.0, np.abs(A).max(axis=(-2, -1)))
    if np.any(np.abs(tr) > tol * scale):
        raise ValueError("matrix is not tracefree")
    return A


def oseen(x):
    """Oseen tensor ``G(x) = (I/r + x x^T / r^3) / (8 pi)``."""
    x, r = _norm(x)
    r = r[..., None, None]
    outer = x[..., :, None] * x[..., None, :]
    return (np.eye(3) / r + outer / r**3) / EIGHT_PI


def oseen_pressure(x):
    """Pressure companion ``P(x) = x / (4 pi r^3)``."""
    x, r = _norm(x)
    return x / (4.0 * np.pi * r[..., None] ** 3)


def oseen_grad(x):
    """First derivatives, ``out[..., i, k, l] = d_l G_ik``."""
    x, r = _norm(x)
    r = r[..., None, None, None]
    eye = np.eye(3)
    xi = x[..., :, None, None]
    xk = x[..., None, :, None]
    xl = x[..., None, None, :]
    out = (-eye[:, :, None] * xl + eye[:, None, :] * xk + xi * eye[None, :, :]) / r**3
    out = out - 3.0 * xi * xk * xl / r**5
    return out / EIGHT_PI


def oseen_hess(x):
    """Second derivatives, ``out[..., i, k, j, l] = d_j d_l G_ik``."""
    x, r = _norm(x)
    r = r[..., None, None, None, None]
    d = np.eye(3)
    X = [x[..., :, None, None, None], x[..., None, :, None, None],
         x[..., None, None, :, None], x[..., None, None, None, :]]
    xi, xk, xj, xl = X
    d_ik = d[:, :, None, None]
    d_lj = d[None, None, :, :].transpose(0, 1, 3, 2)
    d_il = d[:, None, None, :]
    d_kj = d[None, :, :, None]
    d_ij = d[:, None, :, None]
    d_kl = d[None, :, None, :]
    out = (-d_ik * d_lj + d_il * d_kj + d_ij * d_kl) / r**3
    out = out + 3.0 * d_ik * xl * xj / r**5
    out = out - 3.0 * (d_il * xk + xi * d_kl) * xj / r**5
    out = out - 3.0 * (d_ij * xk * xl + xi * d_kj * xl + xi * xk * d_lj) / r**5
    out = out + 15.0 * xi * xk * xl * xj / r**7
    return out / EIGHT_PI


def oseen_hess_apply(x, B):
    """Return ``(hess G(x) B)_ij = d_j d_l G_ik B_kl``.

    This is also the gradient of the dipole field ``h[B]`` at ``x``.
    """
    x, r = _norm(x)
    B = np.asarray(B, dtype=float)
    ir2 = 1.0 / (r * r)
    ir3 = (ir2 / r)[..., None, None] / EIGHT_PI
    Bx = np.einsum("...kl,...l->...k", B, x)
    BTx = np.einsum("...lk,...l->...k", B, x)
    xBx = np.einsum("...k,...k->...", x, Bx)
    c5 = 3.0 * ir2[..., None]
    left = c5 * (Bx - BTx)
    right = -c5 * (Bx + BTx) + (15.0 * xBx * ir2 * ir2)[..., None] * x
    out = np.swapaxes(B, -1, -2) - B
    out = out + left[..., :, None] * x[..., None, :] + x[..., :, None] * right[..., None, :]
    out = out - (3.0 * xBx * ir2)[..., None, None] * np.eye(3)
    return out * ir3


def hess_contract(x, A, B):
    """Scalar ``A : (hess G(x) B)`` for tracefree ``A`` and ``B``.

    Avoids building any rank-four tensor, so it is the workhorse of the
    O(N^2) pair sums.
    """
    x, r = _norm(x)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Ax = np.einsum("...kl,...l->...k", A, x)
    ATx = np.einsum("...lk,...l->...k", A, x)
    Bx = np.einsum("...kl,...l->...k", B, x)
    BTx = np.einsum("...lk,...l->...k", B, x)
    AB = np.einsum("...ij,...ij->...", A, B)
    ABt = np.einsum("...ij,...ji->...", A, B)
    dot = lambda a, b: np.einsum("...k,...k->...", a, b)
    quad = dot(Ax, Bx) - dot(Ax, BTx) - dot(ATx, Bx) - dot(ATx, BTx)
    out = (ABt - AB) / r**3 + 3.0 * quad / r**5
    out = out + 15.0 * dot(x, Ax) * dot(x, Bx) / r**7
    return out / EIGHT_PI


def dipole_field(A, x):
    """Velocity and pressure of the point dipole ``h[A] = A : grad G``.

    Solves ``-lap h + grad p = div(A delta)`` away from the origin.
    """
    x, r = _norm(x)
    A = np.asarray(A, dtype=float)
    Ax = np.einsum("...kl,...l->...k", A, x)
    skew = A - np.swapaxes(A, -1, -2)
    xAx = np.einsum("...k,...k->...", x, Ax)
    h = -3.0 * (xAx / r**5)[..., None] * x
    h = h - np.einsum("...kl,...l->...k", skew, x) / r[..., None] ** 3
    p = -6.0 * xAx / r**5
    return h / EIGHT_PI, p / EIGHT_PI


# --- interior of the smeared dipole --------------------------------------

def _exponents(deg):
    return [e for e in itertools.product(range(deg + 1), repeat=3) if sum(e) <= deg]


def _monomials(y, exps):
    y = np.asarray(y, dtype=float)
    cols = [y[..., 0] ** a * y[..., 1] ** b * y[..., 2] ** c for a, b, c in exps]
    return np.stack(cols, axis=-1)


def _monomial_grads(y, exps):
    """``out[..., m, d]`` = derivative of monomial m along axis d."""
    y = np.asarray(y, dtype=float)
    out = np.zeros(y.shape[:-1] + (len(exps), 3))
    for m, e in enumerate(exps):
        for d in range(3):
            if e[d] == 0:
                continue
            f = list(e)
            f[d] -= 1
            out[..., m, d] = e[d] * y[..., 0] ** f[0] * y[..., 1] ** f[1] * y[..., 2] ** f[2]
    return out


def _deriv_matrix(src, dst, d):
    """Linear map on coefficient vectors for the derivative along axis d."""
    index = {e: k for k, e in enumerate(dst)}
    D = np.zeros((len(dst), len(src)))
    for m, e in enumerate(src):
        if e[d] == 0:
            continue
        f = list(e)
        f[d] -= 1
        D[index[tuple(f)], m] += e[d]
    return D


def _ball_moment(e):
    """Integral of ``x^a y^b z^c`` over the unit ball."""
    from scipy.special import gamma
    if any(k % 2 for k in e):
        return 0.0
    b = [(k + 1) / 2.0 for k in e]
    s = sum(e)
    # product of half-integer betas times the radial integral
    return 2.0 * np.prod([gamma(v) for v in b]) / gamma(sum(b)) / (s + 3)


def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + 5.0**0.5) * k
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def _tracefree_basis():
    basis = {}
    for a in range(3):
        for b in range(3):
            if a != b:
                E = np.zeros((3, 3))
                E[a, b] = 1.0
                basis[(a, b)] = E
    for a in range(2):
        E = np.zeros((3, 3))
        E[a, a], E[2, 2] = 1.0, -1.0
        basis[(a, a)] = E
    return basis


def _solve_ansatz(A, vdeg, pdeg, n_colloc=60):
    """Least-squares polynomial Stokes solve in the unit ball.

    Velocity of degree ``vdeg`` and pressure of degree ``pdeg`` must solve
    homogeneous Stokes, be divergence free, match ``h[A]`` on the unit
    sphere and carry zero mean pressure.  Returns coefficients and the
    max residual of the linear system.
    """
    ve, pe = _exponents(vdeg), _exponents(pdeg)
    nv, npr = len(ve), len(pe)
    low = _exponents(max(vdeg - 2, pdeg - 1))
    mid = _exponents(vdeg - 1)
    rows, rhs = [], []
    lap = sum(_deriv_matrix(_exponents(vdeg - 1), low, d) @ _deriv_matrix(ve, _exponents(vdeg - 1), d)
              for d in range(3))
    for i in range(3):
        blk = np.zeros((len(low), 3 * nv + npr))
        blk[:, i * nv:(i + 1) * nv] = -lap
        blk[:, 3 * nv:] = _deriv_matrix(pe, low, i)
        rows.append(blk)
        rhs.append(np.zeros(len(low)))
    blk = np.zeros((len(mid), 3 * nv + npr))
    for i in range(3):
        blk[:, i * nv:(i + 1) * nv] = _deriv_matrix(ve, mid, i)
    rows.append(blk)
    rhs.append(np.zeros(len(mid)))
    y = _fibonacci_sphere(n_colloc)
    mon = _monomials(y, ve)
    target, _ = dipole_field(A, y)
    for i in range(3):
        blk = np.zeros((len(y), 3 * nv + npr))
        blk[:, i * nv:(i + 1) * nv] = mon
        rows.append(blk)
        rhs.append(target[:, i])
    blk = np.zeros((1, 3 * nv + npr))
    blk[0, 3 * nv:] = [_ball_moment(e) for e in pe]
    rows.append(blk)
    rhs.append(np.zeros(1))
    M = np.vstack(rows)
    b = np.concatenate(rhs)
    sol, *_ = np.linalg.lstsq(M, b, rcond=None)
    resid = np.abs(M @ sol - b).max()
    return sol[:3 * nv].reshape(3, nv), sol[3 * nv:], resid


@functools.lru_cache(maxsize=None)
def interior_coefficients(tol=1e-10):
    """Unit-ball interior solution on the tracefree basis.

    Returns ``(vel_exps, pres_exps, Cu, Cp, resid)`` where ``Cu[a, b]`` and
    ``Cp[a, b]`` are the coefficients attached to the entry ``A_ab``.  The
    degree is raised once if the residual misses ``tol``.
    """
    for vdeg, pdeg in ((3, 2), (5, 4)):
        ve, pe = _exponents(vdeg), _exponents(pdeg)
        Cu = np.zeros((3, 3, 3, len(ve)))
        Cp = np.zeros((3, 3, len(pe)))
        worst = 0.0
        for (a, b), E in _tracefree_basis().items():
            cu, cp, res = _solve_ansatz(E, vdeg, pdeg)
            Cu[a, b], Cp[a, b] = cu, cp
            worst = max(worst, res)
        if worst <= tol:
            return tuple(ve), tuple(pe), Cu, Cp, worst
    raise RuntimeError(f"interior dipole ansatz residual {worst:.2e} above {tol:.0e}")


def _interior(A, eta, x, want_grad):
    ve, pe, Cu, Cp, _ = interior_coefficients()
    y = np.asarray(x, dtype=float) / eta
    ku = np.einsum("...ab,abim->...im", A, Cu)
    kp = np.einsum("...ab,abm->...m", A, Cp)
    u = np.einsum("...im,...m->...i", ku, _monomials(y, ve)) / eta**2
    p = np.einsum("...m,...m->...", kp, _monomials(y, pe)) / eta**3
    if not want_grad:
        return u, p
    g = np.einsum("...im,...mj->...ij", ku, _monomial_grads(y, ve)) / eta**3
    return u, p, g


def h_eta_interior(A, eta, x):
    """Interior velocity and pressure of the smeared dipole, ``|x| <= eta``."""
    A = check_tracefree(A)
    if eta <= 0:
        raise ValueError("eta must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(np.linalg.norm(x, axis=-1) > eta * (1.0 + 1e-12)):
        raise ValueError("point outside the regularization ball")
    A_b = np.broadcast_to(A, x.shape[:-1] + (3, 3))
    return _interior(A_b, eta, x, False)


def h_eta(A, eta, x):
    """Velocity and pressure of the dipole smeared over the sphere of radius eta.

    Equals ``dipole_field`` outside the ball and the polynomial Stokes
    solution inside, with zero-mean interior pressure.
    """
    A = check_tracefree(A)
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    A_b = np.broadcast_to(A, x.shape[:-1] + (3, 3))
    u = np.empty(x.shape)
    p = np.empty(x.shape[:-1])
    out = r > eta
    if np.any(out):
        u[out], p[out] = dipole_field(A_b[out], x[out])
    if np.any(~out):
        u[~out], p[~out] = _interior(A_b[~out], eta, x[~out], False)
    return u, p


def grad_h_eta(A, eta, x):
    """Gradient ``out[..., i, j] = d_j h^eta_i`` of the smeared dipole."""
    A = check_tracefree(A)
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    A_b = np.broadcast_to(A, x.shape[:-1] + (3, 3))
    g = np.empty(x.shape + (3,))
    out = r > eta
    if np.any(out):
        g[out] = oseen_hess_apply(x[out], A_b[out])
    if np.any(~out):
        g[~out] = _interior(A_b[~out], eta, x[~out], True)[2]
    return g


def theta_eta(A, eta, x):
    """Compactly supported matrix field whose divergence is the smeared source.

    Inside the closed ball of radius eta it is a polynomial in ``A^T`` minus
    ``2 D h^eta`` plus ``p^eta I``; it vanishes outside.  Its integral over
    the ball is ``A``.
    """
    A = check_tracefree(A)
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    A_b = np.broadcast_to(A, x.shape[:-1] + (3, 3))
    out = np.zeros(x.shape + (3,))
    inside = r <= eta
    if not np.any(inside):
        return out
    xi = x[inside]
    At = np.swapaxes(A_b[inside], -1, -2)
    Atx = np.einsum("nij,nj->ni", At, xi)
    r2 = (xi * xi).sum(-1)[:, None, None]
    poly = Atx[:, :, None] * xi[:, None, :] + xi[:, :, None] * Atx[:, None, :]
    poly = poly - 2.5 * r2 * At + 1.25 * eta**2 * At
    poly = 3.0 / (np.pi * eta**5) * poly
    _, p, g = _interior(A_b[inside], eta, xi, True)
    out[inside] = poly - (g + np.swapaxes(g, -1, -2)) + p[:, None, None] * np.eye(3)
    return out


def self_energy(A, B, eta=1.0):
    """Exact ``integral grad h^eta[A] : grad h^eta[B]`` over all of space.

    Interior part by Gauss quadrature of the polynomial gradient, exterior
    part in closed form from the angular average of the dipole gradient.
    Scales as ``eta**-3``.
    """
    A = check_tracefree(A)
    B = check_tracefree(B)
    return _self_energy_unit(tuple(map(tuple, A)), tuple(map(tuple, B))) / eta**3


@functools.lru_cache(maxsize=256)
def _self_energy_unit(A, B):
    A = np.array(A)
    B = np.array(B)
    ang, wa = sphere_rule(16, 32)
    rg, wr = np.polynomial.legendre.leggauss(12)
    rg = 0.5 * (rg + 1.0)
    wr = 0.5 * wr
    pts = rg[:, None, None] * ang[None]
    w = (wr * rg**2)[:, None] * wa[None]
    ga = _interior(np.broadcast_to(A, pts.shape[:-1] + (3, 3)), 1.0, pts, True)[2]
    gb = _interior(np.broadcast_to(B, pts.shape[:-1] + (3, 3)), 1.0, pts, True)[2]
    inner = np.sum(w * np.einsum("...ij,...ij->...", ga, gb))
    # outside: integrand is homogeneous of degree -6, radial integral is 1/3
    ha = oseen_hess_apply(ang, A)
    hb = oseen_hess_apply(ang, B)
    outer = np.sum(wa * np.einsum("...ij,...ij->...", ha, hb)) / 3.0
    return inner + outer


def sphere_rule(n_theta, n_phi):
    """Gauss-Legendre in cos(theta) times trapezoid in phi on the unit sphere.

    Exact for spherical harmonics of degree below ``min(2 n_theta, n_phi)``.
    """
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    ph = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    st = np.sqrt(1.0 - ct**2)
    pts = np.stack([
        st[:, None] * np.cos(ph)[None, :],
        st[:, None] * np.sin(ph)[None, :],
        np.broadcast_to(ct[:, None], (n_theta, n_phi)),
    ], axis=-1).reshape(-1, 3)
    w = np.repeat(wt, n_phi) * (2.0 * np.pi / n_phi)
    return pts, w



def _shell_midpoint(A, d, d_outer, n):
    nr, nc, nph = 4 * n, 8 * n, 16 * n
    r = d + (d_outer - d) * (np.arange(nr) + 0.5) / nr
    c = -1.0 + 2.0 * (np.arange(nc) + 0.5) / nc
    ph = 2.0 * np.pi * (np.arange(nph) + 0.5) / nph
    s = np.sqrt(1.0 - c**2)
    ang = np.stack([s[:, None] * np.cos(ph)[None], s[:, None] * np.sin(ph)[None],
                    np.broadcast_to(c[:, None], (nc, nph))], -1).reshape(-1, 3)
    wa = (2.0 / nc) * (2.0 * np.pi / nph)
    H = oseen_hess_apply(ang, np.broadcast_to(np.asarray(A, float), (len(ang), 3, 3)))
    # hess G(r w) r^2 = hess G(w) / r
    wr = (d_outer - d) / nr / r
    return wr.sum() * wa * H.sum(0)


def shell_integral(A, d, d_outer, level=3, romberg=True):
    """Midpoint rule for ``int_{d <= |y| <= d'} hess G(y) A dy`` in ``(r, cos theta, phi)``.

    Level ``l`` uses ``4 * 2^l`` radial, ``8 * 2^l`` polar and ``16 * 2^l``
    azimuthal cells.  With ``romberg`` the midpoint values of levels
    ``0..l`` are Richardson-extrapolated in ``h^2``.  The exact value is zero.
    """
    if not 0 < d < d_outer:
        raise ValueError("need 0 < d < d'")
    level = int(level)
    if not romberg:
        return _shell_midpoint(A, d, d_outer, 2**level)
    row = [_shell_midpoint(A, d, d_outer, 2**k) for k in range(level + 1)]
    for m in range(1, level + 1):
        f = 4.0**m
        row = [(f * row[k + 1] - row[k]) / (f - 1.0) for k in range(len(row) - 1)]
    return row[0]
