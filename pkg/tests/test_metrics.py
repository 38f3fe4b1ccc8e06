import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_rotation
from suspension import metrics
from suspension.acceptance import brute_force_bottleneck
from suspension.kinetic import KineticEnsemble
from suspension.pointproc import MarkLaw

UP = np.array([0.0, 0.0, 1.0])
BOX = {"domain": {"kind": "box", "lo": (0, 0, 0), "hi": (1, 1, 1)},
       "marks": {"kind": "vmf", "mu": (0, 0, 1), "kappa": 1e6}}


def random_ensemble(rng, n):
    return KineticEnsemble.uniform(rng.random((n, 3)), MarkLaw().sample(n, rng))


def line(points):
    x = np.zeros((len(points), 3))
    x[:, 0] = points
    return KineticEnsemble.uniform(x, np.tile(UP, (len(points), 1)))


# --- bottleneck ------------------------------------------------------------

def test_identical_ensembles(rng):
    A = random_ensemble(rng, 12)
    assert metrics.winf_bottleneck(A, A) == 0.0


def test_line_example():
    assert metrics.winf_bottleneck(line([0.0, 1.0]), line([0.1, 0.9])) == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_brute_force(seed):
    rng = np.random.default_rng(seed)
    A, B = random_ensemble(rng, 8), random_ensemble(rng, 8)
    D = metrics.product_distance(A.x, A.xi, B.x, B.xi)
    assert metrics.winf_bottleneck(A, B) == brute_force_bottleneck(D)


def test_unequal_counts_refused(rng):
    with pytest.raises(ValueError, match="winf_to_density"):
        metrics.winf_bottleneck(random_ensemble(rng, 3), random_ensemble(rng, 4))


def test_weighted_refused(rng):
    A = KineticEnsemble(rng.random((2, 3)), np.tile(UP, (2, 1)), [0.25, 0.75])
    with pytest.raises(ValueError, match="uniform"):
        metrics.winf_bottleneck(A, A)


@given(st.integers(0, 10_000))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_ensemble(rng, 6) for _ in range(3))
    ab, ba = metrics.winf_bottleneck(A, B), metrics.winf_bottleneck(B, A)
    assert ab == ba
    assert ab <= metrics.winf_bottleneck(A, C) + metrics.winf_bottleneck(C, B) + 1e-12


@given(st.integers(0, 10_000))
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    A, B = random_ensemble(rng, 7), random_ensemble(rng, 7)
    Q, b = random_rotation(rng), rng.normal(size=3)
    move = lambda E: KineticEnsemble.uniform(E.x @ Q.T + b, E.xi @ Q.T)
    assert metrics.winf_bottleneck(move(A), move(B)) == pytest.approx(metrics.winf_bottleneck(A, B), abs=1e-12)


# --- density estimate ------------------------------------------------------

def lattice(n):
    g = (np.arange(n) + 0.5) / n
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    return KineticEnsemble.uniform(X, np.tile(UP, (len(X), 1)))


def test_density_of_itself_is_zero(rng):
    A = random_ensemble(rng, 20)
    assert metrics.winf_to_density(A, A).value == 0.0


@pytest.mark.slow
def test_lattice_against_uniform():
    for n in (4, 8):
        N = n**3
        d = metrics.winf_to_density(lattice(n), BOX, n_resamples=2)
        assert 0.5 <= d.value * N ** (1 / 3) <= 2.0


def test_iid_sample_rate_lower_bound():
    vals = []
    Ns = (16, 64, 256)
    full = {"domain": {"kind": "box", "lo": (0, 0, 0), "hi": (1, 1, 1)}, "marks": {"kind": "uniform"}}
    from suspension.kinetic import sample_initial
    for k, N in enumerate(Ns):
        A = sample_initial(full, N, 100 + k)
        vals.append(metrics.winf_to_density(A, full, n_resamples=2).value)
    # five-dimensional phase space: the estimate cannot fall faster than N^(-1/5)
    fit = metrics.fit_slope(Ns, vals)
    assert fit.slope >= -0.25
    assert all(v >= 0.3 * N ** -0.2 for v, N in zip(vals, Ns))


def test_density_needs_oversampling(rng):
    with pytest.raises(ValueError):
        metrics.winf_to_density(random_ensemble(rng, 4), BOX, m=2)


# --- dual-norm proxy -------------------------------------------------------

@pytest.fixture(scope="module")
def dictionary():
    return metrics.default_dictionary([[0.5, 0.5, 0.5], [0.2, 0.7, 0.4]])


def test_dual_proxy_zero_for_equal(rng, dictionary):
    A = random_ensemble(rng, 30)
    assert metrics.dual_norm_proxy(A, A, dictionary) == 0.0


def test_dual_proxy_constant_dictionary(rng):
    one = metrics.TestFunction(lambda x, xi: np.ones(len(x)), 1.0, 0.0, name="one")
    assert metrics.dual_norm_proxy(random_ensemble(rng, 10), random_ensemble(rng, 25), [one]) < 1e-15


def test_dual_proxy_linear_in_translation(rng, dictionary):
    A = random_ensemble(rng, 40)
    slope = max(abs(A.w @ tf.gradient_x(A.x, A.xi)[:, 0]) / tf.norm for tf in dictionary)
    for t in (1e-3, 2e-3, 4e-3):
        B = A.replace(x=A.x + t * np.array([1.0, 0.0, 0.0]))
        assert metrics.dual_norm_proxy(B, A, dictionary) / t == pytest.approx(slope, rel=2e-2)


def test_dual_proxy_below_winf_bound(rng, dictionary):
    lip = max(tf.lipschitz / tf.norm for tf in dictionary)
    for _ in range(5):
        A, B = random_ensemble(rng, 15), random_ensemble(rng, 15)
        assert metrics.dual_norm_proxy(A, B, dictionary) <= lip * metrics.winf_bottleneck(A, B) + 1e-15


def test_dual_proxy_rejects_bad_dictionary(rng):
    A = random_ensemble(rng, 5)
    with pytest.raises(ValueError):
        metrics.dual_norm_proxy(A, A, [])
    bad = metrics.TestFunction(lambda x, xi: np.ones(len(x)), 0.0, name="bad")
    with pytest.raises(ValueError, match="normalization"):
        metrics.dual_norm_proxy(A, A, [bad])


# --- studies ---------------------------------------------------------------

@pytest.mark.parametrize("power", [1, 2])
def test_fit_recovers_power(power):
    x = np.array([0.01, 0.02, 0.04, 0.08])
    fit = metrics.fit_slope(x, 3.0 * x**power)
    assert abs(fit.slope - power) <= 0.01 and fit.residual < 1e-12


def test_study_outputs_and_failures(tmp_path):
    def ev(level):
        if level == 4:
            raise RuntimeError("diverged")
        return 2.0 * level, 0.1
    st_ = metrics.run_study("phi", [1, 2, 3, 4, 5], ev, out_dir=tmp_path, name="demo")
    assert "diverged" in st_.failures[4]
    assert st_.fit.slope == pytest.approx(1.0, abs=1e-12)
    csv = (tmp_path / "demo.csv").read_text().splitlines()
    assert csv[0] == "level,value,stderr,failed" and csv[4].endswith(",1")
    assert "demo.csv" in (tmp_path / "plot_demo.py").read_text()


def test_study_needs_three_levels():
    with pytest.raises(ValueError):
        metrics.run_study("N", [1, 2], lambda lv: (1.0, 0.0))
