"""Distances between ensembles and the convergence-study harness.

Points live in ``R^3 x S^2`` with the distance
``max(|x - y|, angle(xi, eta))``.  For equal-size uniform ensembles the
Wasserstein-infinity distance is the bottleneck matching value, computed
exactly by bisection over the sorted pair distances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.special import eval_legendre
from scipy.stats import linregress

from .kinetic import KineticEnsemble, make_density


def _points(a):
    if isinstance(a, KineticEnsemble):
        return a.x, a.xi, a.w
    x, xi = a[0], a[1]
    x, xi = np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(xi, float))
    w = np.full(len(x), 1.0 / len(x)) if len(a) < 3 else np.asarray(a[2], float)
    return x, xi, w


def product_distance(x1, xi1, x2, xi2):
    """Pairwise ``max(|x - y|, arccos(xi . eta))`` matrix."""
    dx = np.linalg.norm(x1[:, None, :] - x2[None, :, :], axis=-1)
    # atan2 keeps small angles exact where arccos of a rounded dot product does not
    c = xi1 @ xi2.T
    s = np.linalg.norm(np.cross(xi1[:, None, :], xi2[None, :, :]), axis=-1)
    return np.maximum(dx, np.arctan2(s, c))


def _has_perfect_matching(D, thr):
    graph = csr_matrix(D <= thr)
    match = maximum_bipartite_matching(graph, perm_type="column")
    return bool(np.all(match >= 0))


def bottleneck_value(D):
    """Smallest ``t`` such that ``D <= t`` admits a perfect matching."""
    D = np.asarray(D, float)
    if D.shape[0] != D.shape[1]:
        raise ValueError("bottleneck matching needs a square distance matrix")
    if D.size == 0:
        return 0.0
    cand = np.unique(D)
    # any perfect matching uses a value >= the largest row/column minimum
    floor = max(D.min(axis=1).max(), D.min(axis=0).max())
    cand = cand[cand >= floor]
    lo, hi = 0, len(cand) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _has_perfect_matching(D, cand[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(cand[lo])


def winf_bottleneck(A, B) -> float:
    """Exact ``W_inf`` between two equal-size, uniformly weighted ensembles."""
    xa, ka, wa = _points(A)
    xb, kb, wb = _points(B)
    if len(xa) != len(xb):
        raise ValueError(f"unequal counts {len(xa)} and {len(xb)}: use winf_to_density")
    n = len(xa)
    if not (np.allclose(wa, 1.0 / n, rtol=0, atol=1e-12) and np.allclose(wb, 1.0 / n, rtol=0, atol=1e-12)):
        raise ValueError("bottleneck distance needs uniform weights")
    return bottleneck_value(product_distance(xa, ka, xb, kb))


def _stratified(ens: KineticEnsemble, m_total):
    """Systematic resampling: atom ``a`` appears ``~ m_total w_a`` times."""
    c = np.cumsum(ens.w) * m_total
    idx = np.searchsorted(c, np.arange(m_total) + 0.5)
    return ens.x[idx], ens.xi[idx]


@dataclass
class DensityDistance:
    value: float
    spread: float
    samples: list


def winf_to_density(A, f, m=4, seed=0, n_resamples=5) -> DensityDistance:
    """Oversampled estimate of ``W_inf(A, f)``.

    ``A`` (``n`` uniform atoms) is matched against ``m n`` draws of ``f``
    with each atom of ``A`` given capacity ``m``.  The value is the mean over
    ``n_resamples`` independent draws, ``spread`` their standard deviation.
    A ``KineticEnsemble`` passed as ``f`` is resampled systematically.
    """
    if m < 4:
        raise ValueError("oversampling m < 4 is too noisy")
    xa, ka, wa = _points(A)
    n = len(xa)
    if not np.allclose(wa, 1.0 / n, rtol=0, atol=1e-12):
        raise ValueError("winf_to_density needs a uniformly weighted ensemble")
    xa_rep, ka_rep = np.repeat(xa, m, axis=0), np.repeat(ka, m, axis=0)
    vals = []
    if isinstance(f, KineticEnsemble):
        xs, ks = _stratified(f, m * n)
        vals = [bottleneck_value(product_distance(xa_rep, ka_rep, xs, ks))]
    else:
        dens = make_density(f)
        ss = np.random.SeedSequence(seed).spawn(n_resamples)
        for s in ss:
            rng = np.random.default_rng(s)
            xs = dens.sample_positions(m * n, rng)
            ks = dens.mark_law.sample(m * n, rng)
            vals.append(bottleneck_value(product_distance(xa_rep, ka_rep, xs, ks)))
    vals = np.asarray(vals)
    return DensityDistance(float(vals.mean()), float(vals.std()), vals.tolist())


# --- dual-norm proxy -----------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Entry of a test dictionary with a bound on its ``W^{1,inf}_x W^{2,inf}_xi`` norm."""
    value: object
    norm: float
    lipschitz: float = None
    gradient_x: object = None
    name: str = ""

    __test__ = False


def _legendre_sup_derivs(ell):
    """``sup |P|, sup |P'|, sup |P''|`` on ``[-1, 1]`` (attained at 1)."""
    return 1.0, ell * (ell + 1) / 2.0, (ell - 1) * ell * (ell + 1) * (ell + 2) / 8.0


def gaussian_zonal(center, width, axis, degree) -> TestFunction:
    """``exp(-|x - c|^2 / (2 s^2)) P_l(xi . n)``.

    ``P_l(xi . n)`` is a spherical harmonic of degree ``l``; its norm bound
    sums the sup norms of the function and its first two tangential
    derivatives.
    """
    c = np.asarray(center, float)
    n = np.asarray(axis, float) / np.linalg.norm(axis)
    s = float(width)
    ell = int(degree)

    def g(x):
        return np.exp(-np.sum((np.asarray(x) - c) ** 2, axis=-1) / (2.0 * s * s))

    def value(x, xi):
        return g(x) * eval_legendre(ell, np.clip(np.asarray(xi) @ n, -1.0, 1.0))

    def gradient_x(x, xi):
        x = np.asarray(x)
        return (-(x - c) / (s * s) * g(x)[..., None]) * eval_legendre(ell, np.clip(np.asarray(xi) @ n, -1.0, 1.0))[..., None]

    p0, p1, p2 = _legendre_sup_derivs(ell)
    gx = 1.0 + 1.0 / (s * math.sqrt(math.e))
    # tangential Hessian of P(xi . n) is bounded by sup|P''| + sup|P'|
    norm = gx * (p0 + p1 + p2 + p1)
    lip = 1.0 / (s * math.sqrt(math.e)) * p0 + 1.0 * p1
    return TestFunction(value, norm, lip, gradient_x, f"gauss({c.tolist()},{s})*P{ell}")


def default_dictionary(centers, widths=(0.25, 0.5), max_degree=4, axes=None):
    """Gaussians on ``centers`` times zonal harmonics of degree ``0..max_degree``."""
    axes = np.eye(3) if axes is None else np.asarray(axes, float)
    out = []
    for c in np.atleast_2d(centers):
        for s in widths:
            for ell in range(max_degree + 1):
                for a in (axes[:1] if ell == 0 else axes):
                    out.append(gaussian_zonal(c, s, a, ell))
    return out


def dual_norm_proxy(A, Bens, dictionary) -> float:
    """``max_phi |<A - B, phi>| / ||phi||`` over ``dictionary``.

    Only a lower bound on the dual norm over the full unit ball.
    """
    if not dictionary:
        raise ValueError("empty test dictionary")
    xa, ka, wa = _points(A)
    xb, kb, wb = _points(Bens)
    best = 0.0
    for k, tf in enumerate(dictionary):
        if tf.norm is None or not np.isfinite(tf.norm) or tf.norm <= 0:
            raise ValueError(f"dictionary entry {k} ({tf.name}) has no positive normalization")
        d = float(wa @ tf.value(xa, ka) - wb @ tf.value(xb, kb))
        best = max(best, abs(d) / tf.norm)
    return best


# --- convergence studies -------------------------------------------------

@dataclass
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    residual: float

    def band(self, z=2.0):
        return self.slope - z * self.stderr, self.slope + z * self.stderr


def fit_slope(x, y) -> SlopeFit:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 3:
        raise ValueError("a slope fit needs at least three levels")
    r = linregress(lx, ly)
    res = ly - (r.intercept + r.slope * lx)
    return SlopeFit(float(r.slope), float(r.stderr), float(r.intercept), float(np.sqrt(np.mean(res**2))))


@dataclass
class ConvergenceStudy:
    variable: str
    levels: list
    values: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    fit: SlopeFit = None

    def __post_init__(self):
        if len(self.levels) < 3:
            raise ValueError("a study needs at least three levels")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("level,value,stderr,failed\n")
            for lv, v, e in zip(self.levels, self.values, self.stderr):
                fh.write(f"{lv!r},{v!r},{e!r},{int(lv in self.failures)}\n")

    def write_plot_script(self, path, csv_name):
        title = f"{self.variable} sweep"
        if self.fit is not None:
            title += f", slope {self.fit.slope:.3f} +- {self.fit.stderr:.3f}"
        Path(path).write_text(
            "import numpy as np\n"
            "import matplotlib.pyplot as plt\n"
            f"d = np.genfromtxt({csv_name!r}, delimiter=',', names=True)\n"
            "ok = d['failed'] == 0\n"
            "plt.errorbar(d['level'][ok], d['value'][ok], yerr=d['stderr'][ok], fmt='o-')\n"
            "plt.xscale('log'); plt.yscale('log')\n"
            f"plt.xlabel({self.variable!r}); plt.title({title!r})\n"
            f"plt.savefig({Path(csv_name).stem + '.png'!r})\n")


def run_study(variable, levels, evaluate, out_dir=None, name="study") -> ConvergenceStudy:
    """Run ``evaluate(level) -> (value, stderr)`` per level and fit the log-log slope.

    A failing level is recorded with ``nan`` values and its error message;
    the fit then uses the remaining levels when at least three are left.
    """
    st = ConvergenceStudy(variable, list(levels))
    for lv in st.levels:
        try:
            v, e = evaluate(lv)
        except Exception as exc:  # noqa: BLE001 - recorded as a failure marker
            st.failures[lv] = f"{type(exc).__name__}: {exc}"
            v, e = float("nan"), float("nan")
        st.values.append(float(v))
        st.stderr.append(float(e))
    ok = [i for i, lv in enumerate(st.levels) if lv not in st.failures]
    if len(ok) >= 3:
        st.fit = fit_slope([st.levels[i] for i in ok], [st.values[i] for i in ok])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        st.write_csv(out / f"{name}.csv")
        st.write_plot_script(out / f"plot_{name}.py", f"{name}.csv")
    return st
