"""The twelve acceptance checks as plain functions.

Each check returns a ``Check`` with a pass flag and a one-line detail.  The
pytest suite and ``suspension --experiment acceptance`` both call these.
"""
from __future__ import annotations

import functools
import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import experiments as ex
from . import fields, kernels, kinetic, metrics, particle
from .pointproc import MarkLaw


@dataclass
class Check:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"criterion {self.number:2d} {self.name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


@functools.lru_cache(maxsize=None)
def _energy_rows(seed):
    return tuple(ex.energy_identity(Ns=(2, 8, 32), n_configs=5, seed=seed, halve=True))


def energy_identity(seed=0, tol=5e-3, budget=300.0):
    rows = _energy_rows(seed)
    # the budget covers the double sums and energies at eta, not the eta/2 reruns
    dt = sum(r.seconds for r in rows)
    worst = max(r.rel_error for r in rows)
    return Check(1, "energy identity", worst <= tol and dt <= budget,
                 f"max rel error {worst:.2e} over {len(rows)} configurations, {dt:.0f} s")


def eta_independence(seed=0, tol=1e-2):
    rows = _energy_rows(seed)
    worst = max(r.rel_eta for r in rows)
    return Check(2, "eta independence", worst <= tol, f"max rel change eta -> eta/2 {worst:.2e}")


def smeared_source(min_order=0.9):
    order, d = ex.theta_order((0.2, 0.1, 0.05))
    return Check(3, "smeared source", order >= min_order, f"fitted order {order:.3f}, defects {np.round(d, 6).tolist()}")


def shell_cancellation(tol=1e-6):
    A = ex.A1 - np.trace(ex.A1) / 3.0 * np.eye(3)
    v = float(np.linalg.norm(kernels.shell_integral(A, 0.5, 2.0, level=3)))
    return Check(4, "shell cancellation", v <= tol, f"annulus norm {v:.2e}")


def jeffery(tol_sphere=1e-6, tol_period=1e-4):
    s = ex.sphere_angular_speed(1.0)
    T = ex.jeffery_period_measured(particle.spheroid(3.0), 1.0)
    exact = 2.0 * np.pi * 10.0 / 3.0
    rel = abs(T - exact) / exact
    return Check(5, "Jeffery dynamics", s <= tol_sphere and rel <= tol_period,
                 f"sphere speed error {s:.1e}, period {T:.10f} vs {exact:.10f} (rel {rel:.1e})")


def reflections(max_ratio=0.5, tol=1e-14):
    r = ex.reflection_check()
    worst = max(r.ratios)
    ok = r.phi_s3 <= 0.1 + 1e-12 and worst <= max_ratio and max(r.pair_velocity_error, r.pair_gradient_error) <= tol
    return Check(6, "reflections", ok,
                 f"phi S3 {r.phi_s3:.3f}, worst ratio {worst:.3f}, pair errors "
                 f"{r.pair_velocity_error:.1e}/{r.pair_gradient_error:.1e}")


def meanfield_identity(tol=1e-2):
    out = []
    for shape in (particle.sphere(), particle.spheroid(3.0)):
        r = ex.remark_identity(shape)
        out.append(r)
    ok = all(r.rel_gap <= tol for r in out)
    det = "; ".join(f"beta {r.beta:.2f}: {r.meanfield:.6e} vs {r.corrected_flow:.6e} (rel {r.rel_gap:.1e}, "
                    f"local {r.local_term:.3e})" for r in out)
    return Check(7, "mean-field vs corrected flow", ok, det)


def limit_convergence(budget=900.0):
    t0 = time.time()
    J0, _, levels = ex.limit_convergence((250, 2000, 16000), (0, 1, 2))
    dt = time.time() - t0
    e = [lv.median_error for lv in levels]
    ok = all(b < a for a, b in zip(e, e[1:])) and dt <= budget
    return Check(8, "limit convergence", ok, f"J0 {J0:.4e}, median errors {[f'{x:.2e}' for x in e]}, {dt:.0f} s")


def b_consistency(tol=2e-2):
    r = ex.b_consistency()
    return Check(9, "B-field consistency", r.rel_gap <= tol,
                 f"weak {r.weak_form:.6e} vs pairing {r.b_pairing:.6e} (rel {r.rel_gap:.1e})")


def scaling(band=(0.7, 1.3)):
    r = ex.scaling_study()
    s = r.study.fit.slope
    ok = band[0] <= s <= band[1] and r.floor_ratio_spread >= 0.5 and r.floor_slope >= -0.3
    return Check(10, "phi scaling", ok,
                 f"slope {s:.3f} +- {r.study.fit.stderr:.3f}, floor slope in N {r.floor_slope:.3f}, "
                 f"W N^(1/5) spread {r.floor_ratio_spread:.2f}")


def structure(tol_kernel=1e-12):
    rng = np.random.default_rng(11)
    worst = {}
    # transport conserves weights and unit orientations
    f0 = kinetic.sample_initial({"domain": {"kind": "ball", "radius": 0.5}, "marks": {"kind": "uniform"}}, 200, 3)
    u = fields.ShearCutoff(1.0, 2.0)
    shape = particle.spheroid(3.0)
    f1 = kinetic.evolve_zero_order(f0, u, shape, 0.5, 0.01)
    worst["weights"] = float(np.abs(f1.w - f0.w).max())
    worst["unit"] = float(np.abs(np.linalg.norm(f1.xi, axis=1) - 1.0).max())
    maps = fields.flow_maps(u, shape, 0.5, 0.01)
    x = rng.uniform(-1.5, 1.5, (200, 3))
    F = maps.evaluate(0.5, x)[2]
    worst["det"] = float(np.abs(np.linalg.det(F) - 1.0).max())
    # divergence of the background and convolved flows
    worst["div_u"] = float(np.abs(np.trace(u.gradient(x), axis1=1, axis2=2)).max())
    # the near-field rule grazes the support boundary; the default rule only reaches 1e-4
    osc = fields.OseenConvolution((1.0, -0.5, 0.3), (0.0, 0.0, 0.0), 1.0, n_r=24, n_theta=32, n_phi=64)
    g = osc.gradient(x[:40])
    worst["div_oseen"] = float(np.abs(np.trace(g, axis1=1, axis2=2)).max() / np.abs(g).max())
    # kernel homogeneity, linearity and parity
    y = rng.normal(size=(50, 3))
    B = rng.normal(size=(50, 3, 3))
    C = rng.normal(size=(50, 3, 3))
    lam = 1.7
    rel = lambda a, b: float(np.abs(a - b).max() / np.abs(b).max())
    worst["kernel"] = max(
        rel(kernels.oseen(lam * y), kernels.oseen(y) / lam),
        rel(kernels.oseen_grad(lam * y), kernels.oseen_grad(y) / lam**2),
        rel(kernels.oseen_hess(lam * y), kernels.oseen_hess(y) / lam**3),
        rel(kernels.oseen(-y), kernels.oseen(y)),
        rel(kernels.oseen_grad(-y), -kernels.oseen_grad(y)),
        rel(kernels.oseen_hess(-y), kernels.oseen_hess(y)),
        rel(kernels.oseen_hess_apply(y, 2.0 * B - 3.0 * C),
            2.0 * kernels.oseen_hess_apply(y, B) - 3.0 * kernels.oseen_hess_apply(y, C)))
    limits = {"weights": 0.0, "unit": 1e-12, "det": 1e-6, "div_u": 1e-5, "div_oseen": 1e-5, "kernel": tol_kernel}
    ok = all(worst[k] <= limits[k] for k in limits)
    return Check(11, "conservation and structure", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def brute_force_bottleneck(D):
    n = len(D)
    return min(max(D[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def bottleneck(n_instances=20, size=8, seed=5):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_instances):
        x1, x2 = rng.random((size, 3)), rng.random((size, 3))
        k1 = MarkLaw().sample(size, rng)
        k2 = MarkLaw().sample(size, rng)
        D = metrics.product_distance(x1, k1, x2, k2)
        if metrics.winf_bottleneck((x1, k1), (x2, k2)) != brute_force_bottleneck(D):
            bad += 1
    return Check(12, "bottleneck exactness", bad == 0, f"{n_instances - bad}/{n_instances} instances exact")


CHECKS = [energy_identity, eta_independence, smeared_source, shell_cancellation, jeffery, reflections,
          meanfield_identity, limit_convergence, b_consistency, scaling, structure, bottleneck]


def run(numbers=None, echo=print):
    out = []
    for k, fn in enumerate(CHECKS, 1):
        if numbers and k not in numbers:
            continue
        t0 = time.time()
        try:
            c = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            c = Check(k, fn.__name__, False, f"{type(exc).__name__}: {exc}")
        c.seconds = time.time() - t0
        if echo:
            echo(c.line())
        out.append(c)
    return out
