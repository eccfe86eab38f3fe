"""Mesh movement by minimizing a meshing energy in the computational frame.

The energy couples alignment and equidistribution of the physical mesh with
respect to a per-element metric.  Its gradient with respect to computational
vertex positions has a closed per-element form (local velocities); the
resulting gradient flow is integrated with the physical mesh and metric
frozen, and the new physical mesh is recovered afterwards through the
piecewise-linear correspondence (geometry.apply_correspondence).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .errors import MeshTanglingError
from .metric import vertex_metrics


@dataclass(frozen=True)
class MeshMotionParams:
    """Dimensionless energy weights and the mesh-motion time scale.

    theta balances alignment against equidistribution (in (0, 0.5]); p > 1
    sharpens both penalties.  tau sets how fast the mesh responds relative
    to the physics.  rtol/atol control the stiff integrator.
    """
    theta: float = 1.0 / 3.0
    p: float = 1.5
    tau: float = 0.01
    rtol: float = 1e-6
    atol: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.theta <= 0.5:
            raise ValueError("theta must lie in (0, 0.5]")
        if self.p <= 1.0:
            raise ValueError("p must exceed 1")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")


# ----------------------------------------------------------------------
# batched element kernels

def _inv_det_2x2(E):
    det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
    inv = np.empty_like(E)
    inv[:, 0, 0] = E[:, 1, 1]
    inv[:, 0, 1] = -E[:, 0, 1]
    inv[:, 1, 0] = -E[:, 1, 0]
    inv[:, 1, 1] = E[:, 0, 0]
    inv /= det[:, None, None]
    return inv, det


def _inv_det(E):
    if E.shape[-1] == 1:
        det = E[:, 0, 0]
        return 1.0 / E, det
    return _inv_det_2x2(E)


def _edge_mats(vertices, conn):
    x = vertices[conn]                                  # (N, d+1, d)
    return np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)


def _g_batched(J, detJ, Minv, sqrt_detM, theta, p, d):
    """G and its partials wrt J and det(J), for stacked elements.

    The matrix partial follows the scalar-by-matrix convention
    (dG/dJ)_{ij} = dG/dJ_{ji}, which is what the velocity formula expects.
    """
    dp2 = 0.5 * d * p
    MJt = np.einsum("kij,klj->kil", Minv, J)            # Minv @ J^T
    tr = np.einsum("kij,kji->k", J, MJt)
    G = theta * sqrt_detM * tr ** dp2 \
        + (1 - 2 * theta) * d ** dp2 * sqrt_detM ** (1 - p) * detJ ** p
    dGdJ = (d * p * theta) * (sqrt_detM * tr ** (dp2 - 1))[:, None, None] * MJt
    dGddet = (p * (1 - 2 * theta) * d ** dp2) * sqrt_detM ** (1 - p) \
        * detJ ** (p - 1)
    return G, dGdJ, dGddet


def g_function_and_derivs(J, detJ, M, params):
    """Energy density G(J, det J, M) and its two partial derivatives.

    J and detJ are treated as independent arguments; dG/dJ is returned in
    scalar-by-matrix layout ((dG/dJ)_{ij} = dG/dJ_{ji}).
    """
    J = np.asarray(J, dtype=float).reshape(1, *np.shape(M))
    M = np.asarray(M, dtype=float)[None]
    if detJ <= 0.0:
        raise MeshTanglingError(f"det(J) = {detJ:.3e} <= 0")
    Minv, detM = _inv_det(M)
    G, dGdJ, dGddet = _g_batched(
        J, np.array([detJ]), Minv, np.sqrt(detM), params.theta, params.p,
        M.shape[-1])
    return float(G[0]), dGdJ[0], float(dGddet[0])


class _FrozenGeometry:
    """Physical-mesh quantities that stay fixed while xi moves."""

    def __init__(self, phys_mesh, metric, params):
        self.conn = phys_mesh.elements
        self.dim = phys_mesh.dim
        E = _edge_mats(phys_mesh.vertices, self.conn)
        self.Einv, self.detE = _inv_det(E)
        if np.any(self.detE <= 0.0):
            raise MeshTanglingError("physical mesh is tangled")
        self.vols = self.detE / (1.0 if self.dim == 1 else 2.0)
        self.Minv, detM = _inv_det(metric.tensors)
        if np.any(detM <= 0.0):
            raise ValueError("metric is not positive definite")
        self.sqrt_detM = np.sqrt(detM)
        self.theta = params.theta
        self.p = params.p
        self.n_vertices = phys_mesh.n_vertices

    def energy(self, comp_vertices):
        Ehat = _edge_mats(comp_vertices, self.conn)
        J = np.einsum("kij,kjl->kil", Ehat, self.Einv)
        detJ = J[:, 0, 0] if self.dim == 1 else \
            J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(detJ <= 0.0):
            raise MeshTanglingError("computational mesh tangled during motion")
        G, _, _ = _g_batched(J, detJ, self.Minv, self.sqrt_detM,
                             self.theta, self.p, self.dim)
        return float(np.sum(self.vols * G))

    def assembled_velocities(self, comp_vertices, *, strict=True):
        """sum_{K in patch(i)} |K| v_{i_K}^K for every vertex, shape (N_v, d).

        This assembly equals minus the energy gradient with respect to the
        computational vertex positions.  With strict=False a collapsed trial
        element gets its Jacobian determinant floored instead of raising, so
        an implicit integrator probing past the valid region can recover;
        validity of accepted meshes is enforced separately.
        """
        d = self.dim
        Ehat = _edge_mats(comp_vertices, self.conn)
        if d == 1:
            detEhat = Ehat[:, 0, 0].copy()
            adj = np.ones_like(Ehat)
        else:
            detEhat = Ehat[:, 0, 0] * Ehat[:, 1, 1] - Ehat[:, 0, 1] * Ehat[:, 1, 0]
            adj = np.empty_like(Ehat)
            adj[:, 0, 0] = Ehat[:, 1, 1]
            adj[:, 0, 1] = -Ehat[:, 0, 1]
            adj[:, 1, 0] = -Ehat[:, 1, 0]
            adj[:, 1, 1] = Ehat[:, 0, 0]
        detJ = detEhat / self.detE
        if np.any(detJ <= 0.0):
            if strict:
                raise MeshTanglingError("computational mesh tangled during motion")
            detJ = np.maximum(detJ, 1e-12)
            detEhat = detJ * self.detE
        Ehat_inv = adj / detEhat[:, None, None]
        J = np.einsum("kij,kjl->kil", Ehat, self.Einv)
        _, dGdJ, dGddet = _g_batched(J, detJ, self.Minv, self.sqrt_detM,
                                     self.theta, self.p, d)
        V = -np.einsum("kij,kjl->kil", self.Einv, dGdJ) \
            - (dGddet * detJ)[:, None, None] * Ehat_inv
        out = np.zeros((self.n_vertices, d))
        weighted = self.vols[:, None, None] * V        # rows are v_1 .. v_d
        v0 = -weighted.sum(axis=1)
        np.add.at(out, self.conn[:, 0], v0)
        for loc in range(1, d + 1):
            np.add.at(out, self.conn[:, loc], weighted[:, loc - 1, :])
        return out


def meshing_energy(mesh, comp_mesh, metric, params):
    """Total meshing energy of the (physical, computational) pair."""
    geom = _FrozenGeometry(mesh, metric, params)
    return geom.energy(comp_mesh.vertices)


def local_velocities(edge_matrix, edge_matrix_ref, M, params):
    """Per-element velocities (v_0, ..., v_d), rows of shape (d+1, d).

    v_1..v_d follow the closed-form gradient of the energy density; v_0
    balances them so the element contribution is translation invariant.
    """
    E = np.asarray(edge_matrix, dtype=float)[None]
    Ehat = np.asarray(edge_matrix_ref, dtype=float)[None]
    d = E.shape[-1]
    Einv, detE = _inv_det(E)
    Ehat_inv, detEhat = _inv_det(Ehat)
    if detE[0] <= 0.0 or detEhat[0] <= 0.0:
        raise MeshTanglingError("singular element in local velocity evaluation")
    J = np.einsum("kij,kjl->kil", Ehat, Einv)
    detJ = detEhat / detE
    Minv, detM = _inv_det(np.asarray(M, dtype=float)[None])
    _, dGdJ, dGddet = _g_batched(J, detJ, Minv, np.sqrt(detM),
                                 params.theta, params.p, d)
    V = -np.einsum("kij,kjl->kil", Einv, dGdJ) \
        - (dGddet * detJ)[:, None, None] * Ehat_inv
    rows = V[0]
    return np.vstack([-rows.sum(axis=0), rows])


def equidistribution_spread(mesh, metric, comp_mesh):
    """Relative spread of |K| sqrt(det M_K) / |K_c| (zero when equidistributed)."""
    detM = np.linalg.det(metric.tensors)
    q = mesh.element_volumes() * np.sqrt(detM) / comp_mesh.element_volumes()
    return float(np.std(q) / np.mean(q))


# ----------------------------------------------------------------------
# the computational-vertex gradient flow

def _dof_layout(mesh):
    free = ~mesh.fixed_mask.ravel()
    return np.nonzero(free)[0]


def _dof_sparsity(mesh, free_idx):
    """Jacobian sparsity of the assembled velocity field on free DOFs."""
    n_v, d = mesh.n_vertices, mesh.dim
    d1 = d + 1
    rows = mesh.elements.ravel()
    cols = np.repeat(np.arange(mesh.n_elements), d1)
    B = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_v, mesh.n_elements))
    A = (B @ B.T).tocoo()
    dofnum = np.full(n_v * d, -1, dtype=np.int64)
    dofnum[free_idx] = np.arange(len(free_idx))
    dofnum = dofnum.reshape(n_v, d)
    rr, cc = [], []
    for a in range(d):
        for b in range(d):
            r = dofnum[A.row, a]
            c = dofnum[A.col, b]
            keep = (r >= 0) & (c >= 0)
            rr.append(r[keep])
            cc.append(c[keep])
    n_free = len(free_idx)
    return sp.coo_matrix(
        (np.ones(sum(len(r) for r in rr)), (np.concatenate(rr), np.concatenate(cc))),
        shape=(n_free, n_free))


def step_computational_mesh(mesh, metric, ref_comp_mesh, params, dt,
                            *, return_trajectory=False):
    """Integrate the computational-vertex gradient flow over one interval.

    The physical mesh and the metric are frozen; integration starts from
    the reference computational mesh.  Boundary vertices slide along their
    facet, corners stay put.  On integrator failure the reference mesh is
    returned unchanged (no motion) with a warning.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    geom = _FrozenGeometry(mesh, metric, params)
    vm = vertex_metrics(mesh, metric)
    P = np.linalg.det(vm) ** ((params.p - 1.0) / 2.0)

    base = ref_comp_mesh.vertices.ravel().copy()
    free_idx = _dof_layout(ref_comp_mesh)
    P_dof = np.repeat(P, mesh.dim)[free_idx] / params.tau

    def rhs(_t, y):
        coords = base.copy()
        coords[free_idx] = y
        vel = geom.assembled_velocities(coords.reshape(-1, mesh.dim),
                                        strict=False)
        return P_dof * vel.ravel()[free_idx]

    # cap the integrator's first probe so it cannot fold a small element
    v0 = np.abs(rhs(0.0, base[free_idx]))
    vmax = v0.max() if len(v0) else 0.0
    min_len = ref_comp_mesh.element_volumes().min() ** (1.0 / mesh.dim)
    first_step = dt if vmax == 0.0 else min(dt, 0.05 * min_len / vmax)

    sparsity = _dof_sparsity(ref_comp_mesh, free_idx)
    try:
        sol = solve_ivp(rhs, (0.0, dt), base[free_idx], method="BDF",
                        rtol=params.rtol, atol=params.atol,
                        jac_sparsity=sparsity, dense_output=False,
                        first_step=first_step)
    except MeshTanglingError as exc:
        warnings.warn(f"mesh motion aborted ({exc}); keeping reference mesh",
                      stacklevel=2)
        return (ref_comp_mesh, []) if return_trajectory else ref_comp_mesh
    if not sol.success:
        warnings.warn(f"mesh motion integrator failed ({sol.message}); "
                      "keeping reference mesh", stacklevel=2)
        return (ref_comp_mesh, []) if return_trajectory else ref_comp_mesh

    coords = base.copy()
    coords[free_idx] = sol.y[:, -1]
    new_comp = ref_comp_mesh.with_vertices(coords.reshape(-1, mesh.dim),
                                           validate=False)
    if np.any(new_comp.element_volumes() <= 0.0):
        warnings.warn("mesh motion produced a tangled computational mesh; "
                      "keeping reference mesh", stacklevel=2)
        return (ref_comp_mesh, []) if return_trajectory else ref_comp_mesh

    if return_trajectory:
        traj = []
        for j, t in enumerate(sol.t):
            c = base.copy()
            c[free_idx] = sol.y[:, j]
            traj.append((float(t), c.reshape(-1, mesh.dim)))
        return new_comp, traj
    return new_comp
