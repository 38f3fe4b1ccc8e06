"""Stationary hardcore marked point processes and their pair statistics.

Two families: Matern type-II thinning of a Poisson parent and a randomly
shifted, jittered cubic lattice.  Marks are i.i.d. unit vectors drawn from
a uniform or von Mises-Fisher law.  ``estimate_nu2`` returns binned
estimates of the pair density minus its decorrelated part, with
translation edge correction in a box window.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import vonmises_fisher


# --- domains -------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.hi, float) < np.asarray(self.lo, float)):
            raise ValueError("box upper corner below lower corner")

    @property
    def sides(self):
        return np.asarray(self.hi, float) - np.asarray(self.lo, float)

    @property
    def volume(self):
        return float(np.prod(self.sides))

    def contains(self, x):
        x = np.asarray(x, float)
        return np.all((x >= np.asarray(self.lo)) & (x <= np.asarray(self.hi)), axis=-1)

    def scaled(self, s):
        return Box(tuple(s * np.asarray(self.lo)), tuple(s * np.asarray(self.hi)))

    def sample(self, n, rng):
        return np.asarray(self.lo) + rng.random((n, 3)) * self.sides


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    @property
    def volume(self):
        return 4.0 / 3.0 * np.pi * self.radius**3

    def contains(self, x):
        return np.linalg.norm(np.asarray(x, float) - np.asarray(self.center), axis=-1) <= self.radius

    def sample(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        rad = self.radius * rng.random(n) ** (1.0 / 3.0)
        return np.asarray(self.center) + rad[:, None] * v


def make_domain(desc):
    """Build a domain from ``{"kind": "box", "lo": .., "hi": ..}`` or a ball record."""
    kind = desc.get("kind")
    if kind == "box":
        return Box(tuple(desc["lo"]), tuple(desc["hi"]))
    if kind == "ball":
        return Ball(tuple(desc.get("center", (0.0, 0.0, 0.0))), float(desc["radius"]))
    raise ValueError(f"unknown domain kind {kind!r}")


# --- mark laws -----------------------------------------------------------

@dataclass(frozen=True)
class MarkLaw:
    """Law of the orientation marks: ``uniform`` or ``vmf`` with mean ``mu``."""
    kind: str = "uniform"
    mu: tuple = (0.0, 0.0, 1.0)
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "vmf"):
            raise ValueError(f"unknown mark law {self.kind!r}")
        if self.kind == "vmf":
            if not self.kappa > 0:
                raise ValueError("von Mises-Fisher concentration must be positive")
            if abs(np.linalg.norm(self.mu) - 1.0) > 1e-12:
                raise ValueError("von Mises-Fisher mean direction must be a unit vector")

    def sample(self, n, rng):
        if n == 0:
            return np.zeros((0, 3))
        if self.kind == "uniform":
            v = rng.normal(size=(n, 3))
            return v / np.linalg.norm(v, axis=1, keepdims=True)
        v = vonmises_fisher(np.asarray(self.mu), self.kappa).rvs(n, random_state=rng)
        return np.atleast_2d(v) / np.linalg.norm(np.atleast_2d(v), axis=1, keepdims=True)

    def pdf(self, xi):
        xi = np.asarray(xi, float)
        if self.kind == "uniform":
            return np.full(xi.shape[:-1], 1.0 / (4.0 * np.pi))
        return vonmises_fisher(np.asarray(self.mu), self.kappa).pdf(xi)

    def _mean_resultant(self):
        k = self.kappa
        return 1.0 / np.tanh(k) - 1.0 / k

    def mean(self):
        if self.kind == "uniform":
            return np.zeros(3)
        return self._mean_resultant() * np.asarray(self.mu, float)

    def second_moment(self):
        """``E[xi xi^T]``."""
        if self.kind == "uniform":
            return np.eye(3) / 3.0
        a = self._mean_resultant() / self.kappa
        mu = np.asarray(self.mu, float)
        return a * np.eye(3) + (1.0 - 3.0 * a) * np.outer(mu, mu)

    def quadrature(self, n_theta=12, n_phi=24):
        """Nodes and weights integrating smooth functions against the law."""
        from .kernels import sphere_rule
        pts, w = sphere_rule(n_theta, n_phi)
        w = w * self.pdf(pts)
        return pts, w / w.sum()


def make_mark_law(desc):
    if desc is None:
        return MarkLaw()
    return MarkLaw(desc.get("kind", "uniform"), tuple(desc.get("mu", (0.0, 0.0, 1.0))),
                   float(desc.get("kappa", 0.0)))


# --- samples -------------------------------------------------------------

@dataclass
class MarkedPointSample:
    points: np.ndarray
    marks: np.ndarray
    c_prime: float
    window: Box
    seed: int
    intensity: float
    family: str = ""
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def min_distance(self):
        if len(self.points) < 2:
            return np.inf
        d, _ = cKDTree(self.points).query(self.points, k=2)
        return float(d[:, 1].min())


def _check_hardcore(sample):
    if sample.min_distance() < sample.c_prime * (1.0 - 1e-12):
        raise AssertionError("hardcore constraint violated")
    if len(sample) and not np.all(sample.window.contains(sample.points)):
        raise AssertionError("point outside the sampling window")


def matern2_intensity(lambda_parent, c_prime):
    """Retained intensity of Matern II thinning in three dimensions."""
    v = 4.0 / 3.0 * np.pi * c_prime**3
    return (1.0 - np.exp(-lambda_parent * v)) / v


def sample_matern_hardcore(lambda_parent, c_prime, window: Box, mark_law=None, seed=0):
    if not lambda_parent > 0 or not c_prime > 0:
        raise ValueError("lambda_parent and c_prime must be positive")
    mark_law = mark_law or MarkLaw()
    rng = np.random.default_rng(seed)
    # parents in the window dilated by c' so thinning near the border is exact
    big = Box(tuple(np.asarray(window.lo) - c_prime), tuple(np.asarray(window.hi) + c_prime))
    n = rng.poisson(lambda_parent * big.volume)
    pts = big.sample(n, rng)
    birth = rng.random(n)
    keep = np.ones(n, bool)
    if n > 1:
        pairs = cKDTree(pts).query_pairs(c_prime, output_type="ndarray")
        if len(pairs):
            later = np.where(birth[pairs[:, 0]] > birth[pairs[:, 1]], pairs[:, 0], pairs[:, 1])
            keep[later] = False
    keep &= window.contains(pts)
    pts = pts[keep]
    sample = MarkedPointSample(pts, mark_law.sample(len(pts), rng), float(c_prime), window, seed,
                               matern2_intensity(lambda_parent, c_prime), "matern2",
                               {"lambda_parent": lambda_parent})
    _check_hardcore(sample)
    return sample


def sample_perturbed_lattice(spacing, jitter, window: Box, mark_law=None, seed=0):
    """Cubic lattice with a uniform random shift and i.i.d. cube jitter.

    The hardcore distance is ``spacing - 2 jitter``.
    """
    if jitter < 0 or spacing - 2.0 * jitter <= 0:
        raise ValueError("need 0 <= jitter < spacing / 2")
    mark_law = mark_law or MarkLaw()
    rng = np.random.default_rng(seed)
    shift = spacing * rng.random(3)
    lo = np.floor((np.asarray(window.lo) - jitter - shift) / spacing).astype(int) - 1
    hi = np.ceil((np.asarray(window.hi) + jitter - shift) / spacing).astype(int) + 1
    axes = [np.arange(l, h + 1) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    pts = grid * spacing + shift
    pts = pts + jitter * (2.0 * rng.random(pts.shape) - 1.0)
    pts = pts[window.contains(pts)]
    sample = MarkedPointSample(pts, mark_law.sample(len(pts), rng), float(spacing - 2.0 * jitter),
                               window, seed, spacing**-3, "lattice",
                               {"spacing": spacing, "jitter": jitter})
    _check_hardcore(sample)
    return sample


def align_marks(sample: MarkedPointSample, strength):
    """Pull each mark towards its nearest neighbour's mark (sign-agnostic).

    Produces a mark-correlated process for exercising the general pair path.
    """
    if len(sample) < 2:
        return sample
    _, idx = cKDTree(sample.points).query(sample.points, k=2)
    nb = sample.marks[idx[:, 1]]
    sgn = np.sign(np.einsum("ij,ij->i", sample.marks, nb))
    sgn[sgn == 0] = 1.0
    m = sample.marks + strength * sgn[:, None] * nb
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    out = MarkedPointSample(sample.points, m, sample.c_prime, sample.window, sample.seed,
                            sample.intensity, sample.family + "+aligned",
                            dict(sample.params, align=strength))
    return out


@dataclass
class ScaledConfiguration:
    epsilon: float
    domain: object
    points: np.ndarray
    marks: np.ndarray

    @property
    def N(self):
        return len(self.points)


def scale_restrict(sample: MarkedPointSample, epsilon, domain):
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = epsilon * sample.points
    keep = domain.contains(x) if len(x) else np.zeros(0, bool)
    return ScaledConfiguration(float(epsilon), domain, x[keep], sample.marks[keep])


def save_sample(sample: MarkedPointSample, path):
    head = (f"# c_prime={float(sample.c_prime)!r} seed={sample.seed} intensity={float(sample.intensity)!r} "
            f"lo={','.join(repr(float(v)) for v in sample.window.lo)} hi={','.join(repr(float(v)) for v in sample.window.hi)}")
    data = np.hstack([sample.points, sample.marks])
    np.savetxt(path, data, delimiter=",", header=head[2:] + "\nx,y,z,xi_x,xi_y,xi_z", comments="# ",
               fmt="%.17g")


def load_sample(path):
    with open(path) as fh:
        head = fh.readline()[2:].split()
    meta = dict(tok.split("=", 1) for tok in head)
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    lo = tuple(float(v) for v in meta["lo"].split(","))
    hi = tuple(float(v) for v in meta["hi"].split(","))
    return MarkedPointSample(data[:, :3].copy(), data[:, 3:].copy(), float(meta["c_prime"]),
                             Box(lo, hi), int(meta["seed"]), float(meta["intensity"]))


# --- pair statistics -----------------------------------------------------

@dataclass
class CorrelationTable:
    """Radial table of the pair density minus ``lambda^2 kappa x kappa``.

    ``values[b, m]`` is the bin average for mark test ``m``.  Bins lying
    below the hardcore distance hold zero: there the difference equals
    ``-lambda^2``, whose principal-value pairing with any -3 homogeneous
    kernel of zero angular mean vanishes.  Beyond the last edge the
    difference is taken to be zero.
    """
    edges: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    lam: float
    c_prime: float
    kappa_moments: dict = field(default_factory=dict)
    warning: bool = False
    correlated_marks: bool = False

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def radial(self, r, test=0):
        """Piecewise-constant ``n2(r) - lambda^2`` for mark test ``test``."""
        r = np.asarray(r, float)
        b = np.searchsorted(self.edges, r, side="right") - 1
        ok = (b >= 0) & (b < len(self.edges) - 1) & (r >= self.c_prime)
        out = np.zeros(r.shape)
        out[ok] = self.values[b[ok], test]
        return out

    def log_moment(self, test=0):
        """``integral (n2(r) - lambda^2) dr / r`` from ``c'`` to infinity."""
        lo = np.maximum(self.edges[:-1], self.c_prime)
        hi = np.maximum(self.edges[1:], self.c_prime)
        return float(np.sum(self.values[:, test] * np.log(hi / np.where(lo > 0, lo, 1.0)) * (hi > lo)))

    def mixing_proxy(self, test=0):
        vol = 4.0 / 3.0 * np.pi * (self.edges[1:] ** 3 - self.edges[:-1] ** 3)
        return float(np.sum(np.abs(self.values[:, test]) * vol / (1.0 + self.centers**3)))


@dataclass(frozen=True)
class LatticeCorrelation:
    """Exact pair density of the shifted, jittered cubic lattice.

    ``n2(y) = lambda sum_{k != 0} p(y - spacing k)`` with ``p`` the density
    of the difference of two independent cube jitters.  Marks uncorrelated.
    """
    spacing: float
    jitter: float

    @property
    def lam(self):
        return self.spacing**-3

    @property
    def c_prime(self):
        return self.spacing - 2.0 * self.jitter

    correlated_marks = False


def _ones(a, b):
    return np.ones(a.shape[:-1])


def estimate_nu2(sample: MarkedPointSample, bins, mark_tests=None, seed=0, n_mark_pairs=200_000):
    """Binned pair density minus its decorrelated part.

    Ordered pairs are counted with translation edge correction
    ``1 / |W cap (W - y)|``.  ``mark_tests`` are vectorized functions
    ``F(xi_1, xi_2)``; the decorrelated reference ``lambda^2 kappa x kappa[F]``
    uses the unbiased ``n (n - 1) / |W|^2`` and a Monte-Carlo average of
    ``F`` over distinct mark pairs.
    """
    edges = np.asarray(bins, float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0:
        raise ValueError("bins must be an increasing grid starting at >= 0")
    n = len(sample)
    if n == 0:
        raise ValueError("empty sample")
    tests = list(mark_tests) if mark_tests else [_ones]
    L = sample.window.sides
    if edges[-1] >= L.min():
        raise ValueError("largest bin edge must be below the window side")
    vol_w = sample.window.volume
    tree = cKDTree(sample.points)
    pairs = tree.query_pairs(edges[-1], output_type="ndarray") if n > 1 else np.zeros((0, 2), int)
    i, j = pairs[:, 0], pairs[:, 1]
    y = sample.points[j] - sample.points[i]
    r = np.linalg.norm(y, axis=1)
    w = 1.0 / np.prod(L - np.abs(y), axis=1)
    b = np.searchsorted(edges, r, side="right") - 1
    ok = (b >= 0) & (b < len(edges) - 1)
    shell = 4.0 / 3.0 * np.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
    nb, nt = len(edges) - 1, len(tests)
    values = np.zeros((nb, nt))
    stderr = np.zeros((nb, nt))
    lam2 = n * (n - 1) / vol_w**2
    rng = np.random.default_rng(seed)
    if n > 1:
        a = rng.integers(0, n, n_mark_pairs)
        c = (a + rng.integers(1, n, n_mark_pairs)) % n
    counts = np.bincount(b[ok], minlength=nb)
    for m, F in enumerate(tests):
        f = F(sample.marks[i], sample.marks[j]) + F(sample.marks[j], sample.marks[i])
        g = F(sample.marks[i], sample.marks[j]) ** 2 + F(sample.marks[j], sample.marks[i]) ** 2
        s = np.bincount(b[ok], weights=(f * w)[ok], minlength=nb)
        s2 = np.bincount(b[ok], weights=(g * w * w)[ok], minlength=nb)
        kk = float(np.mean(F(sample.marks[a], sample.marks[c]))) if n > 1 else 0.0
        values[:, m] = s / shell - lam2 * kk
        stderr[:, m] = np.sqrt(s2) / shell
    below = edges[1:] <= sample.c_prime
    values[below] = 0.0
    stderr[below] = 0.0
    warn = bool(np.any(counts[~below] < 10))
    if warn:
        warnings.warn("fewer than 10 pairs in some correlation bins", RuntimeWarning, stacklevel=2)
    moments = {"mean": sample.marks.mean(0), "second": sample.marks.T @ sample.marks / n}
    return CorrelationTable(edges, values, stderr, n / vol_w, sample.c_prime, moments, warn,
                            correlated_marks="aligned" in sample.family)
