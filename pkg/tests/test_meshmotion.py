import numpy as np
import pytest

from atseg.errors import MeshTanglingError
from atseg.geometry import apply_correspondence, build_uniform_mesh
from atseg.meshmotion import (
    MeshMotionParams,
    _FrozenGeometry,
    equidistribution_spread,
    g_function_and_derivs,
    local_velocities,
    meshing_energy,
    step_computational_mesh,
)
from atseg.metric import MetricField
from helpers import perturbed_mesh, random_spd_tensors

PARAMS = MeshMotionParams()


def identity_metric(mesh):
    eye = np.eye(mesh.dim)
    return MetricField(np.repeat(eye[None], mesh.n_elements, axis=0), 1e-6)


def layered_metric_1d(mesh, strength=40.0, width=0.05):
    """1D metric peaking at x = 0.5 (analytic, evaluated at element centers)."""
    xc = mesh.vertices[mesh.elements].mean(axis=1)[:, 0]
    m = (1.0 + strength * np.exp(-((xc - 0.5) / width) ** 2)) ** 2
    return MetricField(m[:, None, None], 1e-6)


def fd_energy_gradient(phys, comp, metric, params, h=1e-6):
    geom = _FrozenGeometry(phys, metric, params)
    flat = comp.vertices.ravel()
    grad = np.zeros_like(flat)
    for idx in range(len(flat)):
        cp, cm = flat.copy(), flat.copy()
        cp[idx] += h
        cm[idx] -= h
        grad[idx] = (geom.energy(cp.reshape(-1, phys.dim))
                     - geom.energy(cm.reshape(-1, phys.dim))) / (2 * h)
    return grad.reshape(-1, phys.dim)


# ----------------------------------------------------------------------
# energy values

def test_energy_two_equal_1d_elements_hand_value():
    # M = 1 and computational = physical: per element
    # G = theta * tr(1)^(p/2) + (1-2*theta) * 1 = 1/3 + 1/3, I_h = |domain| * 2/3
    mesh = build_uniform_mesh(1, 2)
    value = meshing_energy(mesh, mesh, identity_metric(mesh), PARAMS)
    assert value == pytest.approx(2.0 / 3.0, rel=1e-14)


def test_energy_identity_configuration_any_mesh():
    # with comp = phys and M = I both terms are constant multiples of |Omega|
    for dim, n in ((1, 13), (2, 5)):
        mesh = perturbed_mesh(dim, n, 0.2, seed=7)
        params = PARAMS
        value = meshing_energy(mesh, mesh, identity_metric(mesh), params)
        d, p, th = dim, params.p, params.theta
        expected = (th * d ** (d * p / 2) + (1 - 2 * th) * d ** (d * p / 2)) * 1.0
        assert value == pytest.approx(expected, rel=1e-12)


def test_energy_signals_tangled_mesh():
    mesh = build_uniform_mesh(1, 4)
    v = mesh.vertices.copy()
    v[1, 0], v[2, 0] = 0.6, 0.1
    bad = mesh.with_vertices(v, validate=False)
    with pytest.raises(MeshTanglingError):
        meshing_energy(bad, mesh, identity_metric(mesh), PARAMS)
    with pytest.raises(MeshTanglingError):
        meshing_energy(mesh, bad, identity_metric(mesh), PARAMS)


# ----------------------------------------------------------------------
# G and its derivatives

def test_g_scalar_1d_hand_values():
    G, dGdJ, dGddet = g_function_and_derivs(
        np.array([[1.0]]), 1.0, np.array([[1.0]]), PARAMS)
    assert G == pytest.approx(2.0 / 3.0, rel=1e-14)
    assert dGddet == pytest.approx(0.5, rel=1e-14)
    # dG/dJ at J=1, M=1 (1D): d*p*theta * tr^(p/2-1) * J = 1/2
    assert dGdJ[0, 0] == pytest.approx(0.5, rel=1e-14)


def test_g_derivatives_match_finite_differences():
    rng = np.random.default_rng(42)
    h = 1e-7
    for trial in range(100):
        d = 1 if trial % 2 == 0 else 2
        M = random_spd_tensors(1, d, seed=trial)[0]
        while True:
            J = rng.normal(size=(d, d)) + np.eye(d)
            if np.linalg.det(J) > 0.2:
                break
        detJ = float(np.linalg.det(J))
        G, dGdJ, dGddet = g_function_and_derivs(J, detJ, M, PARAMS)

        # matrix partial, scalar-by-matrix layout: (dG/dJ)_{ij} = dG/dJ_{ji}
        for i in range(d):
            for j in range(d):
                Jp, Jm = J.copy(), J.copy()
                Jp[j, i] += h
                Jm[j, i] -= h
                fd = (g_function_and_derivs(Jp, detJ, M, PARAMS)[0]
                      - g_function_and_derivs(Jm, detJ, M, PARAMS)[0]) / (2 * h)
                assert dGdJ[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)

        fd_det = (g_function_and_derivs(J, detJ + h, M, PARAMS)[0]
                  - g_function_and_derivs(J, detJ - h, M, PARAMS)[0]) / (2 * h)
        assert dGddet == pytest.approx(fd_det, rel=1e-6)


def test_g_rejects_nonpositive_detj():
    with pytest.raises(MeshTanglingError):
        g_function_and_derivs(np.eye(2), -0.5, np.eye(2), PARAMS)


# ----------------------------------------------------------------------
# local velocities and the assembled gradient

def test_equilibrium_velocities_vanish():
    mesh = build_uniform_mesh(1, 10)
    geom = _FrozenGeometry(mesh, identity_metric(mesh), PARAMS)
    vel = geom.assembled_velocities(mesh.vertices)
    interior = ~mesh.fixed_mask.any(axis=1)
    assert np.abs(vel[interior]).max() < 1e-12


def test_velocity_pushes_perturbed_vertex_back():
    mesh = build_uniform_mesh(1, 10)
    comp = mesh.vertices.copy()
    comp[5, 0] += 0.02
    geom = _FrozenGeometry(mesh, identity_metric(mesh), PARAMS)
    vel = geom.assembled_velocities(comp)
    assert vel[5, 0] < 0.0  # descent direction restores uniformity


def test_local_velocities_sum_to_zero():
    rng = np.random.default_rng(9)

    def draw(d):
        while True:
            A = rng.normal(size=(d, d)) + 2 * np.eye(d)
            if np.linalg.det(A) > 0.2:
                return A

    for d in (1, 2):
        E, Ehat = draw(d), draw(d)
        M = random_spd_tensors(1, d, seed=5)[0]
        v = local_velocities(E, Ehat, M, PARAMS)
        assert v.shape == (d + 1, d)
        assert np.abs(v.sum(axis=0)).max() < 1e-12


def test_assembled_velocities_match_energy_gradient():
    for dim, n, seed in ((1, 8, 0), (2, 4, 1)):
        phys = perturbed_mesh(dim, n, 0.2, seed=seed)
        comp = perturbed_mesh(dim, n, 0.2, seed=seed + 10)
        metric = MetricField(
            random_spd_tensors(phys.n_elements, dim, seed + 20), 1e-6)
        geom = _FrozenGeometry(phys, metric, PARAMS)
        vel = geom.assembled_velocities(comp.vertices)
        grad = fd_energy_gradient(phys, comp, metric, PARAMS)
        free = ~phys.fixed_mask
        num = np.abs(vel[free] + grad[free]).max()
        den = np.abs(grad[free]).max()
        assert num / den < 1e-6


# ----------------------------------------------------------------------
# the mesh step

def test_step_stationary_configuration():
    mesh = build_uniform_mesh(1, 12)
    out = step_computational_mesh(mesh, identity_metric(mesh), mesh, PARAMS, 0.1)
    assert np.abs(out.vertices - mesh.vertices).max() < 1e-9


def test_step_concentrates_vertices_in_layer():
    mesh = build_uniform_mesh(1, 60)
    metric = layered_metric_1d(mesh)
    spread0 = equidistribution_spread(mesh, metric, mesh)
    comp = step_computational_mesh(mesh, metric, mesh, PARAMS, 2.0)
    phys = apply_correspondence(mesh, comp, mesh)
    metric_new = layered_metric_1d(phys)
    spread1 = equidistribution_spread(phys, metric_new, mesh)
    assert np.all(phys.element_volumes() > 0)
    assert spread1 < spread0 / 5.0
    # vertices must crowd near x = 0.5
    h_layer = np.diff(phys.vertices[:, 0])[np.abs(
        phys.vertices[:-1, 0] - 0.5) < 0.05].min()
    assert h_layer < 0.5 / 60


def test_step_energy_descent_along_trajectory():
    mesh = build_uniform_mesh(1, 40)
    metric = layered_metric_1d(mesh, strength=20.0)
    params = MeshMotionParams(rtol=1e-8, atol=1e-11)
    geom = _FrozenGeometry(mesh, metric, params)
    comp, traj = step_computational_mesh(mesh, metric, mesh, params, 0.5,
                                         return_trajectory=True)
    energies = [geom.energy(c) for _, c in traj]
    for prev, nxt in zip(energies, energies[1:]):
        assert nxt <= prev + 1e-10 * abs(prev)


def test_step_metric_scaling_invariance():
    # M -> c*M leaves the flow invariant thanks to the P_i normalization
    mesh = build_uniform_mesh(1, 30)
    metric = layered_metric_1d(mesh, strength=10.0)
    params = MeshMotionParams(rtol=1e-10, atol=1e-13)
    ref = step_computational_mesh(mesh, metric, mesh, params, 0.3)
    for c in (0.1, 10.0):
        scaled = MetricField(c * metric.tensors, metric.floor)
        out = step_computational_mesh(mesh, scaled, mesh, params, 0.3)
        assert np.abs(out.vertices - ref.vertices).max() < 1e-8


def test_step_2d_runs_and_stays_valid():
    mesh = build_uniform_mesh(2, 8)
    x = mesh.vertices[:, 0]
    U = 0.5 * (1 + np.tanh(10 * (x - 0.5)))
    from atseg.metric import metric_for_state
    metric = metric_for_state(mesh, U)
    comp = step_computational_mesh(mesh, metric, mesh, PARAMS, 0.05)
    phys = apply_correspondence(mesh, comp, mesh)
    assert np.all(comp.element_volumes() > 0)
    assert np.all(phys.element_volumes() > 0)
    spread0 = equidistribution_spread(mesh, metric, mesh)
    from atseg.metric import metric_for_state as mfs
    spread1 = equidistribution_spread(phys, mfs(phys, 0.5 * (
        1 + np.tanh(10 * (phys.vertices[:, 0] - 0.5)))), mesh)
    assert spread1 < spread0


def test_step_rejects_bad_dt():
    mesh = build_uniform_mesh(1, 5)
    with pytest.raises(ValueError):
        step_computational_mesh(mesh, identity_metric(mesh), mesh, PARAMS, 0.0)
