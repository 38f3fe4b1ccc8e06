import numpy as np
import pytest

from suspension import fields, kinetic, metrics, particle
from suspension.kinetic import KineticEnsemble
from suspension.pointproc import MarkLaw

BALL = {"domain": {"kind": "ball", "radius": 1.0}, "marks": {"kind": "uniform"}}
SHAPE = particle.spheroid(3.0)


@pytest.fixture(scope="module")
def ens():
    return kinetic.sample_initial(BALL, 300, 7)


def test_zero_flow_leaves_ensemble(ens):
    out = kinetic.evolve_zero_order(ens, fields.ZeroFlow(), SHAPE, 1.0, 0.1)
    assert np.array_equal(out.x, ens.x) and np.allclose(out.xi, ens.xi, atol=1e-15)
    assert out.t == 1.0


def test_mass_is_conserved_exactly(ens):
    out = kinetic.evolve_zero_order(ens, fields.ShearCutoff(1.0, 2.0), SHAPE, 0.5, 0.05)
    assert np.array_equal(out.w, ens.w)
    assert np.abs(np.linalg.norm(out.xi, axis=1) - 1.0).max() < 1e-14


def test_positions_follow_flow_map(ens):
    u = fields.ShearCutoff(1.0, 2.0)
    out = kinetic.evolve_zero_order(ens, u, SHAPE, 1.0, 0.05)
    X, Xi, _ = fields.flow_maps(u, SHAPE, 1.0, 0.05).evaluate(1.0, ens.x, ens.xi)
    moved = KineticEnsemble.uniform(X, Xi)
    assert metrics.winf_bottleneck(out, moved) <= 2 * 0.05**2
    assert np.abs(out.x - X).max() < 1e-13


def test_corrected_reduces_to_zero_order(ens):
    u = fields.ShearCutoff(1.0, 2.0)
    a = kinetic.evolve_zero_order(ens, u, SHAPE, 0.5, 0.05)
    b = kinetic.evolve_corrected(ens, u, u, lambda t, x, xi: np.ones((len(x), 3, 3)), SHAPE, 0.0, 0.5, 0.05)
    c = kinetic.evolve_corrected(ens, None, u, None, SHAPE, 0.3, 0.5, 0.05)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.xi, b.xi)
    assert np.array_equal(a.x, c.x) and np.array_equal(a.xi, c.xi)


def test_corrected_B_changes_only_orientations(ens):
    u = fields.ShearCutoff(1.0, 2.0)
    L = np.zeros((3, 3))
    L[0, 2] = L[2, 0] = 1.0
    B = lambda t, x, xi: np.broadcast_to(L, (len(x), 3, 3))
    a = kinetic.evolve_corrected(ens, u, u, None, SHAPE, 0.1, 0.5, 0.05)
    b = kinetic.evolve_corrected(ens, u, u, B, SHAPE, 0.1, 0.5, 0.05)
    assert np.array_equal(a.x, b.x)
    assert np.abs(a.xi - b.xi).max() > 1e-3


def test_corrected_undefined_B_names_sample(ens):
    def B(t, x, xi):
        out = np.zeros((len(x), 3, 3))
        out[5] = np.nan
        return out
    with pytest.raises(ValueError, match="sample 5"):
        kinetic.evolve_corrected(ens, fields.ZeroFlow(), fields.ZeroFlow(), B, SHAPE, 0.1, 0.1, 0.05)


def test_reversibility(ens):
    u = fields.ShearCutoff(1.0, 2.0)
    L = np.zeros((3, 3))
    L[0, 1] = L[1, 0] = 0.5
    B = lambda t, x, xi: np.broadcast_to(L, (len(x), 3, 3))
    fwd = kinetic.evolve_corrected(ens, u, u, B, SHAPE, 0.05, 1.0, 0.01)
    back = kinetic.evolve_corrected(fwd, u, u, B, SHAPE, 0.05, -1.0, 0.01)
    assert np.abs(back.x - ens.x).max() < 1e-8 and np.abs(back.xi - ens.xi).max() < 1e-8
    assert back.t == pytest.approx(0.0, abs=1e-15)


def test_one_step_versus_two_half_steps(ens):
    u = fields.ShearCutoff(1.0, 1.0)
    errs = []
    for dt in (0.2, 0.1):
        a = kinetic.evolve_zero_order(ens, u, SHAPE, dt, dt)
        b = kinetic.evolve_zero_order(ens, u, SHAPE, dt, dt / 2)
        errs.append(np.abs(a.x - b.x).max())
    # local error of RK4 is fifth order in dt
    assert np.log2(errs[0] / errs[1]) > 4.5


def test_sample_initial_halves_balanced():
    n = 4000
    e = kinetic.sample_initial(BALL, n, 11)
    left = np.count_nonzero(e.x[:, 0] < 0)
    assert abs(left - (n - left)) <= 3 * np.sqrt(n / 2)
    assert np.all(np.linalg.norm(e.x, axis=1) <= 1.0)
    assert np.allclose(e.w, 1.0 / n) and e.origin == "continuum"


def test_sample_initial_mark_mean():
    law = {"kind": "vmf", "mu": (0.0, 0.6, 0.8), "kappa": 3.0}
    n = 5000
    e = kinetic.sample_initial({"domain": {"kind": "box", "lo": (0, 0, 0), "hi": (1, 1, 1)}, "marks": law}, n, 5)
    m = MarkLaw("vmf", (0.0, 0.6, 0.8), 3.0)
    se = np.sqrt(np.diag(m.second_moment() - np.outer(m.mean(), m.mean())) / n)
    assert np.all(np.abs(e.xi.mean(0) - m.mean()) <= 3 * se)


def test_sample_initial_single():
    e = kinetic.sample_initial(BALL, 1, 0)
    assert e.n == 1 and e.w[0] == 1.0


def test_sample_initial_invalid():
    with pytest.raises(ValueError):
        kinetic.sample_initial({"marks": {}}, 10, 0)
    with pytest.raises(ValueError):
        kinetic.sample_initial(BALL, 0, 0)


def test_bump_second_moment():
    e = kinetic.sample_initial({"domain": {"kind": "bump", "radius": 1.0}}, 40000, 2)
    r2 = np.sum(e.x**2, axis=1)
    # E|x|^2 under (1 - r^2)^4 is B(5/2, 5) / B(3/2, 5) = 3/13
    assert abs(r2.mean() - 3.0 / 13.0) <= 3 * r2.std() / np.sqrt(len(r2))


def test_csv_round_trip(ens, tmp_path):
    p = tmp_path / "snap.csv"
    ens.to_csv(p)
    back = KineticEnsemble.from_csv(p)
    assert np.array_equal(back.x, ens.x) and np.allclose(back.xi, ens.xi, atol=1e-15)
    assert np.allclose(back.w, ens.w, rtol=1e-15) and back.t == ens.t


def test_ensemble_invariants_enforced():
    with pytest.raises(ValueError):
        KineticEnsemble(np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1)), [0.3, 0.3])
    with pytest.raises(ValueError):
        KineticEnsemble(np.zeros((1, 3)), [[0, 0, 2.0]], [1.0])
