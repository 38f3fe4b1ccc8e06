import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_rotation, random_tracefree
from suspension import fields, kernels, particle
from suspension.kinetic import KineticEnsemble
from suspension.pointproc import MarkLaw


def fd_gradient(fn, x, h=1e-5):
    g = np.zeros(x.shape + (3,))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        g[..., j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def test_shear_preset_gradient_at_origin():
    u = fields.background_flow({"kind": "shear_cutoff", "gamma": 1.5, "radius": 2.0})
    expect = np.zeros((3, 3))
    expect[0, 1] = 1.5
    assert np.array_equal(u.gradient(np.zeros((1, 3)))[0], expect)


def test_shear_preset_divergence_free_and_consistent(rng):
    u = fields.ShearCutoff(1.0, 1.0)
    x = rng.uniform(-2.5, 2.5, (300, 3))
    g = u.gradient(x)
    assert np.abs(np.trace(g, axis1=1, axis2=2)).max() < 1e-12
    assert np.abs(g - fd_gradient(u.velocity, x)).max() < 1e-5
    assert np.abs(u.velocity(3.0 * x / np.linalg.norm(x, axis=1, keepdims=True))).max() == 0.0


def test_bump_far_field_is_a_stokeslet():
    F = np.array([1.0, -0.5, 0.3])
    u = fields.background_flow({"kind": "bump", "force": F, "radius": 1.0})
    for d in ([1.0, 0, 0], [0.3, 0.5, -0.8]):
        x = 10.0 * np.asarray(d) / np.linalg.norm(d)
        ref = kernels.oseen(x) @ F
        assert np.linalg.norm(u.velocity(x[None])[0] - ref) <= 0.02 * np.linalg.norm(ref)


def test_bump_force_integrates_to_total():
    F = np.array([0.2, 1.0, -0.7])
    u = fields.OseenConvolution(F, (0.5, 0.0, 0.0), 0.8)
    assert np.allclose(np.einsum("q,qk->k", u.weights, u.force(u.nodes)), F, rtol=1e-10)


def test_zero_force_gives_zero_flow(rng):
    x = rng.normal(size=(20, 3))
    for desc in ({"kind": "zero"}, {"kind": "bump", "force": (0, 0, 0), "radius": 1.0}):
        u = fields.background_flow(desc)
        assert np.all(u.velocity(x) == 0.0) and np.all(u.gradient(x) == 0.0)


def test_noncompact_force_rejected():
    with pytest.raises(ValueError):
        fields.background_flow({"kind": "bump", "force": (1, 0, 0), "radius": np.inf})
    with pytest.raises(ValueError):
        fields.background_flow({"kind": "gravity"})


def test_bump_flow_rotates_with_force(rng):
    F = np.array([1.0, 0.2, -0.4])
    Q = random_rotation(rng)
    x = rng.uniform(-3, 3, (6, 3))
    u = fields.OseenConvolution(F, radius=1.0)
    v = fields.OseenConvolution(Q @ F, radius=1.0)
    assert np.allclose(v.velocity(x @ Q.T), u.velocity(x) @ Q.T, atol=1e-6)


def test_bump_gradient_divergence_free_far(rng):
    u = fields.OseenConvolution((1.0, 0.0, 0.5), radius=1.0)
    x = rng.normal(size=(30, 3))
    x = 3.0 * x / np.linalg.norm(x, axis=1, keepdims=True)
    g = u.gradient(x)
    assert np.abs(np.trace(g, axis1=1, axis2=2)).max() < 1e-6 * np.abs(g).max()
    assert np.abs(g - fd_gradient(u.velocity, x)).max() < 1e-5


# --- effective viscosity ---------------------------------------------------

def test_viscosity_single_atom(rng):
    shape = particle.spheroid(3.0)
    xi0 = np.array([0.0, 0.6, 0.8])
    x = rng.normal(size=(50, 3))
    f = KineticEnsemble.uniform(x, np.tile(xi0, (50, 1)))
    V = fields.effective_viscosity(f, shape, bandwidth=0.5)
    y = rng.normal(size=(7, 3))
    E = random_tracefree(rng, sym=True)
    expect = V.density(y)[:, None, None] * particle.stresslet_apply(shape, xi0, E)
    assert np.allclose(V.apply(y, E), expect, atol=1e-13)
    assert V.meta["bandwidth"] == 0.5


def test_viscosity_sphere_is_isotropic(rng):
    shape = particle.sphere()
    f = KineticEnsemble.uniform(rng.normal(size=(40, 3)), MarkLaw().sample(40, rng))
    V = fields.effective_viscosity(f, shape)
    y = rng.normal(size=(5, 3))
    E = random_tracefree(rng, sym=True)
    assert np.allclose(V.apply(y, E), shape.c_iso * V.density(y)[:, None, None] * E, atol=1e-13)


def test_viscosity_uniform_marks_monte_carlo():
    shape = particle.spheroid(3.0)
    E = random_tracefree(np.random.default_rng(3), sym=True)
    V = fields.DensityViscosity(lambda x: np.ones(np.shape(x)[:-1]), fields.Ellipsoid.ball((0, 0, 0), 1.0),
                                MarkLaw(), shape)
    xi = MarkLaw().sample(10**6, np.random.default_rng(4))
    mc = particle.stresslet_apply(shape, xi, np.broadcast_to(E, (len(xi), 3, 3))).mean(0)
    q = V.mean_stresslet(E)
    assert np.linalg.norm(q - mc) <= 1e-2 * np.linalg.norm(q)


def test_viscosity_tensor_maps_sym0_to_sym0(rng):
    shape = particle.spheroid(3.0)
    f = KineticEnsemble.uniform(rng.normal(size=(30, 3)), MarkLaw().sample(30, rng))
    V = fields.effective_viscosity(f, shape)
    y = rng.normal(size=(4, 3))
    T = V.tensor(y)
    E = random_tracefree(rng, sym=True)
    out = np.einsum("nijkl,kl->nij", T, E)
    assert np.allclose(out, V.apply(y, E), atol=1e-12)
    assert np.allclose(out, np.swapaxes(out, 1, 2), atol=1e-12)
    assert np.abs(np.trace(out, axis1=1, axis2=2)).max() < 1e-12


def test_viscosity_rejects_negative_weights():
    class Fake:
        x = np.zeros((2, 3))
        xi = np.tile([0.0, 0.0, 1.0], (2, 1))
        w = np.array([1.5, -0.5])
    with pytest.raises(ValueError):
        fields.effective_viscosity(Fake(), particle.sphere())


# --- corrected flow --------------------------------------------------------

def _bump_viscosity(shape, radius=1.0):
    def rho(x):
        s = np.linalg.norm(np.asarray(x, float), axis=-1) / radius
        return np.where(s < 1, np.clip(1 - s * s, 0, None) ** 3, 0.0)
    return fields.DensityViscosity(rho, fields.Ellipsoid.ball((0, 0, 0), radius),
                                   MarkLaw("vmf", (0.0, 0.6, 0.8), 2.0), shape)


@pytest.fixture(scope="module")
def corrected_setup():
    u = fields.ShearCutoff(1.0, 1.0)
    V = _bump_viscosity(particle.spheroid(3.0))
    return u, V


def test_corrected_flow_phi_zero_is_background(corrected_setup, rng):
    u, V = corrected_setup
    c = fields.corrected_flow(u, V, 0.0)
    x = rng.normal(size=(10, 3))
    assert np.array_equal(c.velocity(x), u.velocity(x))
    assert np.array_equal(c.gradient(x), u.gradient(x))
    with pytest.raises(ValueError):
        fields.corrected_flow(u, V, -0.1)


def test_corrected_flow_difference_scales_with_phi(corrected_setup, rng):
    u, V = corrected_setup
    x = rng.uniform(-1.5, 1.5, (8, 3))
    ratios = []
    for phi in (0.02, 0.01, 0.005):
        c = fields.corrected_flow(u, V, phi, n_r=12, n_theta=12, n_phi=24)
        ratios.append(np.abs(c.velocity(x) - u.velocity(x)).max() / phi)
    assert max(ratios) / min(ratios) <= 1.2
    c1 = fields.corrected_flow(u, V, 0.01, n_r=12, n_theta=12, n_phi=24)
    c2 = fields.corrected_flow(u, V, 0.02, n_r=12, n_theta=12, n_phi=24)
    c3 = fields.corrected_flow(u, V, 0.03, n_r=12, n_theta=12, n_phi=24)
    lhs = c1.velocity(x) + c2.velocity(x) - 2 * u.velocity(x)
    assert np.allclose(lhs, c3.velocity(x) - u.velocity(x), atol=1e-14)


def test_corrected_gradient_two_routes(corrected_setup):
    u, V = corrected_setup
    c = fields.corrected_flow(u, V, 0.01, n_r=24, n_theta=24, n_phi=48)
    z = np.array([[0.2, -0.1, 0.3], [0.5, 0.4, -0.2], [1.4, 0.0, 0.3]])
    pv = (c.gradient(z) - u.gradient(z)) / c.phi
    fd = (c.gradient_fd(z, step=2e-2) - u.gradient(z)) / c.phi
    assert np.linalg.norm(pv - fd) <= 1e-2 * np.linalg.norm(pv)


def test_corrected_flow_needs_support(corrected_setup):
    u, _ = corrected_setup

    class NoSupport(fields.ViscosityField):
        pass
    with pytest.raises(ValueError):
        fields.corrected_flow(u, NoSupport(), 0.1)


# --- flow maps -------------------------------------------------------------

def test_flow_maps_time_zero_identity(rng):
    maps = fields.flow_maps(fields.ShearCutoff(1.0, 2.0), particle.spheroid(3.0), 1.0, 0.01)
    x = rng.normal(size=(5, 3))
    xi = MarkLaw().sample(5, rng)
    X, Xi, F = maps.evaluate(0.0, x, xi)
    assert np.array_equal(X, x) and np.array_equal(Xi, xi) and np.array_equal(F, np.tile(np.eye(3), (5, 1, 1)))


def test_flow_maps_zero_flow(rng):
    maps = fields.flow_maps(fields.ZeroFlow(), particle.spheroid(3.0), 2.0, 0.1)
    x = rng.normal(size=(5, 3))
    xi = MarkLaw().sample(5, rng)
    X, Xi, _ = maps.evaluate(2.0, x, xi)
    assert np.array_equal(X, x) and np.allclose(Xi, xi, atol=1e-15)


def test_flow_maps_volume_preserving(rng):
    maps = fields.flow_maps(fields.ShearCutoff(1.0, 1.0), particle.spheroid(3.0), 1.0, 0.01)
    x = rng.uniform(-2.0, 2.0, (100, 3))
    X, Xi, F = maps.evaluate(1.0, x, MarkLaw().sample(100, rng))
    assert np.abs(np.linalg.det(F) - 1.0).max() <= 1e-6
    assert np.abs(np.linalg.norm(Xi, axis=1) - 1.0).max() < 1e-14
    assert np.abs(F - fd_gradient(lambda y: maps.phi_map(1.0, y), x, h=1e-5)).max() < 1e-6


def test_flow_maps_semigroup_and_inverse(rng):
    maps = fields.flow_maps(fields.ShearCutoff(1.0, 1.0), particle.sphere(), 1.0, 0.01)
    x = rng.uniform(-2.0, 2.0, (20, 3))
    once = maps.phi_map(0.7, x)
    twice = maps.phi_map(0.4, maps.phi_map(0.3, x))
    assert np.abs(once - twice).max() < 1e-9
    assert np.abs(maps.inverse(0.7, once) - x).max() < 1e-9


def test_flow_maps_linear_flow_exact(rng):
    L = random_tracefree(rng)
    maps = fields.flow_maps(fields.LinearFlow(L), particle.sphere(), 1.0, 0.01)
    from scipy.linalg import expm
    x = rng.normal(size=(4, 3))
    X, _, F = maps.evaluate(1.0, x)
    assert np.allclose(F, np.tile(expm(L), (4, 1, 1)), atol=1e-9)
    assert np.allclose(X, x @ expm(L).T, atol=1e-9)


def test_flow_maps_reject_bad_step():
    with pytest.raises(ValueError):
        fields.flow_maps(fields.ZeroFlow(), particle.sphere(), 1.0, 0.0)


def test_flow_maps_step_rejection():
    maps = fields.flow_maps(fields.ShearCutoff(5.0, 0.5), particle.sphere(), 1.0, 0.5, tol=1e-14)
    with pytest.raises(RuntimeError):
        maps.evaluate(1.0, np.array([[0.6, 0.3, 0.0]]))


@given(st.floats(0.1, 1.0), st.floats(0.1, 1.0))
def test_flow_maps_semigroup_property(s, t):
    maps = fields.flow_maps(fields.ShearCutoff(1.0, 1.0), particle.sphere(), 2.0, 0.01)
    x = np.array([[0.4, -0.8, 0.5], [1.2, 0.3, -0.1]])
    a = maps.phi_map(s + t, x)
    b = maps.phi_map(t, maps.phi_map(s, x))
    # unequal step splits give O(dt^4) per unit time
    assert np.abs(a - b).max() < 1e-7
