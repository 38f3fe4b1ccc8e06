import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from suspension import pointproc as pp
from suspension.pointproc import Box, MarkLaw, MarkedPointSample

WIN = Box((0.0, 0.0, 0.0), (8.0, 8.0, 8.0))


@given(seed=st.integers(0, 10**6), lam=st.floats(0.2, 2.0), c=st.floats(0.3, 1.0))
def test_matern_hardcore_distance(seed, lam, c):
    s = pp.sample_matern_hardcore(lam, c, Box((0, 0, 0), (4.0, 4.0, 4.0)), seed=seed)
    assert s.min_distance() >= c


def test_matern_intensity_against_analytic():
    # classical Matern II retained intensity (1 - exp(-lambda v)) / v
    lam, c = 0.8, 1.0
    counts = np.array([len(pp.sample_matern_hardcore(lam, c, WIN, seed=s)) for s in range(50)])
    est = counts / WIN.volume
    se = est.std(ddof=1) / np.sqrt(len(est))
    ref = (1 - np.exp(-lam * 4 / 3 * np.pi)) / (4 / 3 * np.pi)
    assert pp.matern2_intensity(lam, c) == pytest.approx(ref, rel=1e-14)
    assert abs(est.mean() - ref) <= 3 * se


def test_mark_law_chi_square():
    rng = np.random.default_rng(0)
    xi = MarkLaw().sample(10_000, rng)
    # equal-area cells: 10 bands in cos(theta) times 4 sectors in azimuth
    band = np.minimum(((xi[:, 2] + 1) / 2 * 10).astype(int), 9)
    sector = ((np.arctan2(xi[:, 1], xi[:, 0]) + np.pi) / (2 * np.pi) * 4).astype(int) % 4
    obs = np.bincount(band * 4 + sector, minlength=40)
    assert stats.chisquare(obs).pvalue > 0.01


def test_vmf_mean_matches_moment():
    law = MarkLaw("vmf", (0.0, 0.6, 0.8), 2.0)
    xi = law.sample(40_000, np.random.default_rng(4))
    se = xi.std(0) / np.sqrt(len(xi))
    assert np.all(np.abs(xi.mean(0) - law.mean()) <= 4 * se)
    assert np.allclose(xi.T @ xi / len(xi), law.second_moment(), atol=0.01)


def test_exact_lattice_without_jitter():
    s = pp.sample_perturbed_lattice(1.0, 0.0, WIN, seed=2)
    assert s.min_distance() == pytest.approx(1.0, abs=1e-12)
    assert s.c_prime == 1.0


def test_lattice_pair_density_decorrelates_at_long_range():
    s = pp.sample_perturbed_lattice(1.0, 0.3, Box((0, 0, 0), (14.0,) * 3), seed=5)
    edges = np.linspace(5.0, 7.0, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = pp.estimate_nu2(s, edges)
    # relative to lambda^2 the residual correlation is small
    assert np.abs(t.values[:, 0]).max() <= 0.05 * t.lam**2


def test_lattice_marks_independent():
    s = pp.sample_perturbed_lattice(1.0, 0.2, Box((0, 0, 0), (12.0,) * 3), seed=6)
    from scipy.spatial import cKDTree
    _, idx = cKDTree(s.points).query(s.points, k=2)
    prod = np.einsum("ij,ij->i", s.marks, s.marks[idx[:, 1]])
    assert abs(prod.mean()) <= 3 * prod.std() / np.sqrt(len(prod))


def test_scale_restrict_whole_window_keeps_all():
    s = pp.sample_perturbed_lattice(1.0, 0.2, WIN, seed=1)
    sc = pp.scale_restrict(s, 0.1, WIN.scaled(0.1))
    assert sc.N == len(s)


def test_scale_restrict_empty_domain():
    s = pp.sample_perturbed_lattice(1.0, 0.2, WIN, seed=1)
    assert pp.scale_restrict(s, 0.1, Box((5.0,) * 3, (6.0,) * 3)).N == 0


def test_scale_restrict_count_law():
    O = Box((0.0,) * 3, (1.0,) * 3)
    ratios = []
    for eps in (0.2, 0.1, 0.05):
        s = pp.sample_perturbed_lattice(1.0, 0.2, Box((0.0,) * 3, (1.0 / eps,) * 3), seed=0)
        sc = pp.scale_restrict(s, eps, O)
        ratios.append(sc.N * eps**3 / (s.intensity * O.volume))
    dev = np.abs(np.array(ratios) - 1)
    assert dev[-1] < 0.05 and dev[-1] <= dev[0]


def test_nu2_zero_below_hardcore():
    s = pp.sample_matern_hardcore(0.8, 1.0, WIN, seed=0)
    t = pp.estimate_nu2(s, np.linspace(0.1, 0.9, 5))
    assert np.all(t.values == 0)


def test_nu2_poisson_control_consistent_with_zero():
    rng = np.random.default_rng(8)
    n = rng.poisson(0.5 * WIN.volume)
    s = MarkedPointSample(WIN.sample(n, rng), MarkLaw().sample(n, rng), 0.0, WIN, 8, 0.5, "poisson")
    t = pp.estimate_nu2(s, np.linspace(0.5, 2.0, 6))
    z = t.values[:, 0] / t.stderr[:, 0]
    assert np.all(np.abs(z) <= 3.5)


def matern2_pair_excess(lam, c, r):
    """Closed-form Matern II ``rho2(r) - lambda_M^2`` for ``r > c`` in three dimensions."""
    v = 4.0 / 3.0 * np.pi * c**3
    V = 2.0 * v - np.pi * (4.0 * c + r) * (2.0 * c - r) ** 2 / 12.0
    V = np.where(r < 2.0 * c, V, 2.0 * v)
    rho2 = 2.0 * (V * (1.0 - np.exp(-lam * v)) - v * (1.0 - np.exp(-lam * V))) / (v * V * (V - v))
    return rho2 - ((1.0 - np.exp(-lam * v)) / v) ** 2


def test_nu2_matern_matches_closed_form_above_hardcore():
    edges = np.array([1.0, 1.15, 1.3, 1.6])
    s = pp.sample_matern_hardcore(1.0, 1.0, Box((0, 0, 0), (14.0,) * 3), seed=9)
    t = pp.estimate_nu2(s, edges)
    g, w = np.polynomial.legendre.leggauss(8)
    for k in range(3):
        r = edges[k] + (edges[k + 1] - edges[k]) * (g + 1) / 2
        wr = w * r**2
        ref = np.sum(wr * matern2_pair_excess(1.0, 1.0, r)) / np.sum(wr)
        assert abs(t.values[k, 0] - ref) <= 3.5 * t.stderr[k, 0]
    # the excess just above the hardcore distance is positive for Matern II
    assert matern2_pair_excess(1.0, 1.0, 1.01) > 0


def test_same_seed_same_sample():
    a = pp.sample_matern_hardcore(0.8, 1.0, WIN, seed=11)
    b = pp.sample_matern_hardcore(0.8, 1.0, WIN, seed=11)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.marks, b.marks)


def test_ergodic_mark_average_converges():
    F = lambda xi: xi[:, 2] ** 2
    devs = []
    for side in (6.0, 12.0, 24.0):
        s = pp.sample_perturbed_lattice(1.0, 0.2, Box((0.0,) * 3, (side,) * 3), seed=3)
        devs.append(abs(F(s.marks).sum() / side**3 - s.intensity / 3.0))
    assert devs[2] < devs[0]


def test_sample_round_trip(tmp_path):
    s = pp.sample_matern_hardcore(0.8, 1.0, Box((0, 0, 0), (4.0,) * 3), seed=2)
    pp.save_sample(s, tmp_path / "s.csv")
    r = pp.load_sample(tmp_path / "s.csv")
    assert np.array_equal(r.points, s.points) and r.c_prime == s.c_prime


def test_invalid_bins_rejected():
    s = pp.sample_matern_hardcore(0.8, 1.0, Box((0, 0, 0), (4.0,) * 3), seed=2)
    with pytest.raises(ValueError, match="window side"):
        pp.estimate_nu2(s, np.linspace(1.0, 5.0, 4))
