"""Experiment drivers shared by the command line and the acceptance suite.

Each driver returns plain numbers in a small dataclass; pass/fail decisions
are left to the caller.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import fields, interaction, kernels, kinetic, metrics, microsim, particle, pointproc
from .fields import Ellipsoid
from .interaction import EnergyQuadrature, PairFunctionalSpec
from .pointproc import Box, LatticeCorrelation, MarkLaw

A1 = np.array([[1.0, 0.5, 0.0], [0.2, -0.3, 0.4], [0.0, 0.1, -0.7]])
A2 = np.array([[0.4, 0.3, -0.2], [0.3, -1.0, 0.1], [-0.2, 0.1, 0.6]])


# --- configurations ------------------------------------------------------

def hardcore_configuration(N, c, seed, side=1.0, max_tries=200_000):
    """``N`` points in a cube by random sequential adsorption, ``d_min >= c N^(-1/3) side``."""
    rng = np.random.default_rng(seed)
    d = c * N ** (-1.0 / 3.0) * side
    pts = np.zeros((N, 3))
    have = 0
    for _ in range(max_tries):
        y = rng.random(3) * side
        if have == 0 or np.min(np.linalg.norm(pts[:have] - y, axis=1)) >= d:
            pts[have] = y
            have += 1
            if have == N:
                return pts
    raise RuntimeError(f"could not place {N} points at distance {d:.3g}")


def random_marks(n, seed):
    return MarkLaw().sample(n, np.random.default_rng(seed))


# --- energy identity -----------------------------------------------------

@dataclass
class EnergyRow:
    N: int
    index: int
    eta: float
    double_sum: float
    energy: float
    rel_error: float
    energy_half: float = float("nan")
    rel_eta: float = float("nan")
    seconds: float = 0.0


def energy_identity(Ns=(2, 8, 32), n_configs=5, c=0.5, seed=0, halve=False, eta=None, **quad):
    """Double sum versus regularized energy on hardcore configurations, constant ``Psi``.

    ``eta`` defaults to the largest admissible value ``(c/4) N^(-1/3)``.
    """
    spec = interaction.constant_spec(A1, A2)
    rows = []
    ss = np.random.SeedSequence(seed)
    for N in Ns:
        for k, s in enumerate(ss.spawn(n_configs)):
            a, b = s.generate_state(2)
            X = hardcore_configuration(N, c, int(a))
            xi = random_marks(N, int(b))
            eta_N = c / 4.0 * N ** (-1.0 / 3.0) if eta is None else eta
            t0 = time.perf_counter()
            ds = interaction.double_sum(X, xi, spec)
            en = interaction.regularized_energy(X, xi, spec, EnergyQuadrature(eta_N, **quad))
            row = EnergyRow(N, k, eta_N, ds, en, abs(ds - en) / abs(ds), seconds=time.perf_counter() - t0)
            if halve:
                row.energy_half = interaction.regularized_energy(X, xi, spec, EnergyQuadrature(eta_N / 2.0, **quad))
                row.rel_eta = abs(row.energy_half - en) / abs(en)
            rows.append(row)
    return rows


# --- smeared source ------------------------------------------------------

def theta_defect(eta, A=A1, n_r=12, n_theta=16, n_phi=32):
    """``|int theta_eta[A] phi - A phi(0)|`` for a smooth test function ``phi``."""
    def test(x):
        return np.exp(x[..., 0] + 0.5 * x[..., 1] - 0.3 * x[..., 2]) * (1.0 + np.sum(x * x, -1))

    g, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * eta * (g + 1.0)
    wr = 0.5 * eta * w * r**2
    ang, wa = kernels.sphere_rule(n_theta, n_phi)
    x = (r[:, None, None] * ang[None]).reshape(-1, 3)
    wt = (wr[:, None] * wa[None]).ravel()
    Th = kernels.theta_eta(A, eta, x)
    val = np.einsum("n,nij,n->ij", wt, Th, test(x))
    return float(np.linalg.norm(val - A * test(np.zeros(3))))


def theta_order(etas=(0.2, 0.1, 0.05)):
    d = [theta_defect(e) for e in etas]
    return metrics.fit_slope(etas, d).slope, d


# --- Jeffery orbits ------------------------------------------------------

def shear_gradient(gamma=1.0):
    G = np.zeros((3, 3))
    G[0, 1] = gamma
    return G


def sphere_angular_speed(gamma=1.0, n=16):
    """Largest deviation of ``|xi'|`` from ``gamma/2`` for ``xi`` in the shear plane."""
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    xi = np.stack([np.cos(t), np.sin(t), np.zeros(n)], 1)
    w = particle.mobility_apply(particle.sphere(), xi, np.broadcast_to(shear_gradient(gamma), (n, 3, 3)))
    return float(np.abs(np.linalg.norm(w, axis=1) - gamma / 2.0).max())


def jeffery_period_measured(shape, gamma=1.0, xi0=(0.3, 0.9, 0.3), n_periods=3):
    """Mean spacing of upward zero crossings of ``xi_1`` in simple shear."""
    G = shear_gradient(gamma)

    def rhs(t, y):
        return particle.mobility_apply(shape, y / np.linalg.norm(y), G)

    def cross(t, y):
        return y[0]
    cross.direction = 1.0
    y0 = np.asarray(xi0, float) / np.linalg.norm(xi0)
    T_guess = 2.0 * np.pi * 4.0 / gamma * (n_periods + 1)
    sol = solve_ivp(rhs, (0.0, T_guess), y0, method="DOP853", rtol=1e-12, atol=1e-13, events=cross)
    ev = sol.t_events[0]
    if len(ev) < 2:
        raise RuntimeError("no full orbit observed")
    return float(np.mean(np.diff(ev)))


# --- reflections ---------------------------------------------------------

@dataclass
class ReflectionCheck:
    phi_s3: float
    ratios: list
    pair_velocity_error: float
    pair_gradient_error: float


def _dipole_oracle(A, x):
    """Closed-form dipole velocity ``-3/(8 pi) (A x . x) x / |x|^5 - (A - A^T) x / (8 pi |x|^3)``."""
    r = np.linalg.norm(x)
    return (-3.0 / (8.0 * np.pi) * (x @ A @ x) * x / r**5
            - (A - A.T) @ x / (8.0 * np.pi * r**3))


def reflection_check(n_side=4, target=0.1, K=6, seed=0):
    shape = particle.spheroid(3.0)
    u = fields.LinearFlow(shear_gradient(1.0) + 0.3 * np.array([[0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]))
    base = microsim.lattice_configuration(n_side, 1.0 / n_side, 1e-3)
    xi = random_marks(base.N, seed)
    _, S = microsim.config_stats(base)
    cfg = microsim.Configuration.from_phi(base.X, xi, target / S[3])
    st = microsim.reflect_solve(cfg, u, shape, K=K, tol=0.0)
    h = st.history
    ratios = [h[k + 1] / h[k] for k in range(len(h) - 1)]

    X2 = np.array([[0.0, 0.0, 0.0], [0.37, -0.21, 0.15]])
    xi2 = random_marks(2, seed + 1)
    pair = microsim.Configuration(X2, xi2, 0.02)
    one = microsim.reflect_solve(pair, u, shape, K=1, tol=0.0)
    r3 = pair.r**3
    E = u.strain(X2)
    src = r3 * particle.stresslet_apply(shape, xi2, E)
    d = X2[0] - X2[1]
    v_or = u.velocity(X2[:1])[0] + _dipole_oracle(src[1], d)
    g_or = u.gradient(X2[:1])[0] + np.einsum("ikjl,kl->ij", kernels.oseen_hess(d), src[1])
    rig_or = particle.mobility_matrix(shape, xi2[0], g_or)
    ev = np.abs(one.velocity[0] - v_or).max() / np.abs(v_or).max()
    eg = np.abs(one.gradient[0] - rig_or).max() / np.abs(rig_or).max()
    return ReflectionCheck(cfg.phi * S[3], ratios, float(ev), float(eg))


# --- mean field versus corrected flow ------------------------------------

@dataclass
class RemarkIdentity:
    beta: float
    meanfield: float
    corrected_flow: float
    rel_gap: float
    local_term: float
    trace_residual: float


def remark_identity(shape, mark_law=MarkLaw("vmf", (0.0, 0.6, 0.8), 2.0), phi=1e-3,
                    outer=(8, 8, 16), inner=(24, 24, 48), flow_rule=(12, 12, 24), pair_rule=(6, 6, 12)):
    """Mean-field term with ``Psi_1 = Mbar grad_xi phi``, ``Psi_2 = S Du`` versus the corrected flow.

    The first path is the principal-value double integral; the second pairs
    ``grad_xi phi . M grad(u_phi - u) xi`` with finite differences of the
    convolved velocity.  ``local_term`` is ``-(1/5) int Psi_1bar : Psi_2bar``.
    """
    dens = kinetic.bump_density((0.0, 0.0, 0.0), 1.0, mark_law)
    u = fields.ShearCutoff(1.0, 2.0)
    a = np.array([1.0, 0.3, 0.0])
    b = np.array([0.0, 0.5, 1.0])

    def grad_xi_phi(x, xi):
        g = np.exp(-np.sum((x - 0.2) ** 2, -1))[:, None]
        return g * ((xi @ b)[:, None] * a + (xi @ a)[:, None] * b)

    nodes, wm = mark_law.quadrature(12, 24)
    V = fields.DensityViscosity(dens.rho, dens.support, mark_law, shape)

    def psi1_bar(x):
        n, q = len(x), len(wm)
        X = np.repeat(x, q, 0)
        XI = np.tile(nodes, (n, 1))
        mb = particle.mbar_apply(shape, XI, grad_xi_phi(X, XI)).reshape(n, q, 3, 3)
        return dens.rho(x)[:, None, None] * np.einsum("q,nqij->nij", wm, mb)

    def psi2_bar(y):
        return V.apply(y, u.strain(y))

    lhs = interaction.meanfield_continuum(psi1_bar, dens.support, psi2_bar, dens.support, outer, inner)
    cf = fields.corrected_flow(u, V, phi, n_r=flow_rule[0], n_theta=flow_rule[1], n_phi=flow_rule[2])
    rhs = interaction.corrected_flow_pairing(dens, cf, grad_xi_phi, shape, dens.support, rule=pair_rule)
    xq, wq = dens.support.quadrature(*outer)
    loc = float(np.einsum("q,qij,qij->", wq, psi1_bar(xq), -psi2_bar(xq) / 5.0))
    return RemarkIdentity(shape.beta, lhs, rhs, abs(lhs - rhs) / abs(rhs), loc,
                          interaction.corrected_flow_pairing.last_trace)


# --- limit of the double sum on a perturbed lattice ----------------------

@dataclass
class BumpField:
    """``b(x) (base + xi_weight (xi xi - I/3))`` with ``b = (1 - (x-c).Q(x-c))^4`` on its ellipsoid."""
    center: tuple
    Q: tuple
    base: tuple
    xi_weight: float

    @property
    def support(self):
        return Ellipsoid(tuple(self.center), tuple(map(tuple, self.Q)))

    def bump(self, x):
        d = np.asarray(x, float) - np.asarray(self.center, float)
        s = np.einsum("...i,ij,...j->...", d, np.asarray(self.Q, float), d)
        return np.where(s < 1.0, (1.0 - np.minimum(s, 1.0)) ** 4, 0.0)

    def __call__(self, x, xi):
        xi = np.asarray(xi, float)
        xx = xi[..., :, None] * xi[..., None, :] - np.eye(3) / 3.0
        return self.bump(x)[..., None, None] * (np.asarray(self.base, float) + self.xi_weight * xx)

    def mark_mean(self, mark_law):
        """Exact average over ``mark_law``: the field is linear in ``xi xi``."""
        m = np.asarray(self.base, float) + self.xi_weight * (mark_law.second_moment() - np.eye(3) / 3.0)
        return lambda x: self.bump(x)[..., None, None] * m


def lattice_fields():
    Q1 = np.diag([1 / 0.30**2, 1 / 0.22**2, 1 / 0.26**2])
    Q2 = np.diag([1 / 0.24**2, 1 / 0.30**2, 1 / 0.20**2])
    Q2[0, 1] = Q2[1, 0] = 3.0
    return (BumpField((0.45, 0.5, 0.52), Q1, A1, 0.8),
            BumpField((0.55, 0.47, 0.5), Q2, A2, -0.6))


def lattice_spec():
    f1, f2 = lattice_fields()
    return PairFunctionalSpec(f1, f2, f1.support, f2.support)


@dataclass
class LimitLevel:
    N_target: int
    N: list
    values: list
    errors: list
    median_error: float


def lattice_limit_value(spacing=1.0, jitter=0.2, mark_law=MarkLaw(), Q=40, outer=(8, 8, 16), inner=(24, 24, 48)):
    """``J^0`` at ``t = 0`` in the unit box: mean-field integral plus ``int Psi_1bar : C(I) Psi_2bar``."""
    f1, f2 = lattice_fields()
    m1, m2 = f1.mark_mean(mark_law), f2.mark_mean(mark_law)
    mf = interaction.meanfield_continuum(m1, f1.support, m2, f2.support, outer, inner)
    lat = LatticeCorrelation(spacing, jitter)
    C = interaction.lattice_C(lat, np.eye(3), Q=Q)
    xq, wq = f1.support.quadrature(*outer)
    corr = float(np.einsum("q,qij,qij->", wq, m1(xq), interaction._apply4(C, m2(xq)))) / lat.lam**2
    return mf, corr


def lattice_double_sum(N_target, seed, spec=None, spacing=1.0, jitter=0.2, mark_law=MarkLaw()):
    """``I^eps`` for the perturbed lattice scaled into the unit box with ``eps = N^(-1/3)``."""
    spec = spec or lattice_spec()
    eps = N_target ** (-1.0 / 3.0)
    win = Box((0.0, 0.0, 0.0), (1.0 / eps,) * 3)
    smp = pointproc.sample_perturbed_lattice(spacing, jitter, win, mark_law, seed)
    X = eps * smp.points
    N = len(X)
    P1, P2 = spec.psi1(X, smp.marks), spec.psi2(X, smp.marks)
    a = np.abs(P1).max(axis=(1, 2)) > 0
    b = np.abs(P2).max(axis=(1, 2)) > 0
    val = interaction.pair_sum(X[a], P1[a], X[b], P2[b], True) / N**2
    return N, float(val)


def limit_convergence(N_targets=(250, 2000, 16000), seeds=(0, 1, 2)):
    spec = lattice_spec()
    mf, corr = lattice_limit_value()
    J0 = mf + corr
    out = []
    for Nt in N_targets:
        Ns, vals = [], []
        for s in seeds:
            N, v = lattice_double_sum(Nt, s, spec)
            Ns.append(N)
            vals.append(v)
        errs = [abs(v - J0) for v in vals]
        out.append(LimitLevel(Nt, Ns, vals, errs, float(np.median(errs))))
    return J0, (mf, corr), out


# --- correlation term versus the B field ---------------------------------

@dataclass
class BConsistency:
    weak_form: float
    b_pairing: float
    rel_gap: float
    n_samples: int


def shear_preset(t=0.5, n_samples=300, seed=0, window_side=14.0, c_prime=1.0, lambda_parent=0.6):
    """Spheroids in the cut-off shear, Matern hardcore correlations, ball ``O`` of radius 0.5."""
    shape = particle.spheroid(3.0)
    u = fields.ShearCutoff(1.0, 2.0)
    law = MarkLaw("vmf", (0.0, 0.0, 1.0), 1.5)
    smp = pointproc.sample_matern_hardcore(lambda_parent, c_prime, Box((0.0,) * 3, (window_side,) * 3), law, seed)
    edges = c_prime + np.linspace(0.0, 2.5 * c_prime, 11)
    corr = pointproc.estimate_nu2(smp, edges, seed=seed)
    f0 = kinetic.sample_initial({"domain": {"kind": "ball", "radius": 0.5},
                                 "marks": {"kind": "vmf", "mu": [0, 0, 1], "kappa": 1.5}}, n_samples, seed + 1)
    maps = fields.flow_maps(u, shape, t, 0.01)
    ft = kinetic.evolve_zero_order(f0, u, shape, t, 0.01)
    return shape, u, law, corr, maps, ft, 4.0 / 3.0 * np.pi * 0.5**3


def b_consistency(t=0.5, n_samples=300, seed=0):
    shape, u, law, corr, maps, ft, vol = shear_preset(t, n_samples, seed)
    a = np.array([0.2, 1.0, 0.4])

    def grad_xi_phi(x, xi):
        g = 1.0 + 0.5 * np.sin(2.0 * x[:, 0])
        return g[:, None] * (2.0 * (xi @ a)[:, None] * a + np.array([0.0, 0.0, 1.0]))

    spec = PairFunctionalSpec(
        lambda x, xi: particle.mbar_apply(shape, xi, grad_xi_phi(x, xi)),
        lambda x, xi: particle.stresslet_apply(shape, xi, u.strain(x)))
    weak = interaction.correlation_term(ft, corr, maps, spec, law, vol, t, method="direct")
    B = interaction.compute_B(corr, u, maps, shape, t, law, vol)
    pair = interaction.b_pairing(ft, B, grad_xi_phi, shape)
    return BConsistency(weak, pair, abs(weak - pair) / abs(pair), ft.n)


# --- scaling of the zero-order error in phi ------------------------------

def micro_vs_zero_order(phi, n_side, t=0.5, dt=0.05, seed=0, K=3, jitter=0.15):
    """``W_inf`` between the microscopic ensemble and the zero-order transport of the same atoms."""
    shape = particle.spheroid(3.0)
    u = fields.ShearCutoff(1.0, 2.0)
    rng = np.random.default_rng(seed)
    h = 1.0 / n_side
    base = microsim.lattice_configuration(n_side, h, phi)
    X = base.X + jitter * h * (2.0 * rng.random(base.X.shape) - 1.0)
    xi = MarkLaw().sample(base.N, rng)
    cfg = microsim.Configuration.from_phi(X, xi, phi)
    f0 = kinetic.KineticEnsemble.from_configuration(cfg)
    zero = kinetic.evolve_zero_order(f0, u, shape, t, dt)
    n = int(np.ceil(t / dt - 1e-9))
    for _ in range(n):
        cfg = microsim.step_micro(cfg, u, shape, t / n, K)
    micro = kinetic.KineticEnsemble.from_configuration(cfg)
    return metrics.winf_bottleneck(micro, zero), cfg, f0


def n_side_law(phi, phi_ref=0.01, n_ref=4):
    """Particle number tied to ``phi`` with ``phi (log N)^2`` decreasing: ``N ~ phi^(-1/2)``."""
    return int(round(n_ref * (phi_ref / phi) ** (1.0 / 6.0)))


@dataclass
class ScalingResult:
    study: metrics.ConvergenceStudy
    floor_N: list
    floor_values: list
    floor_slope: float
    floor_ratio_spread: float
    gate: list = field(default_factory=list)


def scaling_study(phis=(0.000625, 0.00125, 0.0025, 0.005), floor_sides=(3, 4, 5, 6), t=0.5, seed=0, out_dir=None):
    gate = []

    def level(phi):
        w, cfg, _ = micro_vs_zero_order(phi, n_side_law(phi), t, seed=seed)
        d, S = microsim.config_stats(cfg)
        gate.append((phi, cfg.N, cfg.phi * S[3]))
        return w, 0.0

    study = metrics.run_study("phi", list(phis), level, out_dir, "winf_vs_phi")
    f0 = {"domain": {"kind": "box", "lo": [-0.5] * 3, "hi": [0.5] * 3}, "marks": {"kind": "uniform"}}
    Ns, vals = [], []
    for n in floor_sides:
        _, _, fN0 = micro_vs_zero_order(1e-3, n, 0.0, seed=seed)
        Ns.append(fN0.n)
        vals.append(metrics.winf_to_density(fN0, f0, m=4, seed=seed, n_resamples=3).value)
    fit = metrics.fit_slope(Ns, vals)
    ratio = np.asarray(vals) * np.asarray(Ns, float) ** 0.2
    return ScalingResult(study, Ns, vals, fit.slope, float(ratio.min() / ratio.max()), gate)
