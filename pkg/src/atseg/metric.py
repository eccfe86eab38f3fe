"""Adaptation metric tensors recovered from the discrete solution.

Per element, a quadratic polynomial is fitted in the least-squares sense to
the nodal values on the surrounding vertex stencil; its Hessian H_K is made
positive (eigenvalue-wise absolute value with a floor) and normalized as

    M_K = det(|H_K|)^(-1/(d+4)) |H_K|,

the piecewise-constant metric under which the mesh is driven to uniformity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import locate_points

DEFAULT_FLOOR = 1e-6


@dataclass(frozen=True)
class MetricField:
    """Per-element SPD tensors plus the eigenvalue floor used to build them."""
    tensors: np.ndarray      # (N, d, d)
    floor: float

    @property
    def dim(self):
        return self.tensors.shape[-1]

    def check(self, sym_tol=1e-12):
        """Assert symmetry, finiteness, and positive definiteness."""
        t = self.tensors
        if not np.all(np.isfinite(t)):
            raise ValueError("metric has non-finite entries")
        asym = np.abs(t - np.swapaxes(t, -1, -2)).max()
        if asym > sym_tol:
            raise ValueError(f"metric asymmetry {asym:.3e} exceeds {sym_tol}")
        eigs = np.linalg.eigvalsh(t)
        if eigs.min() <= 0.0:
            raise ValueError(f"metric not positive definite (min eig {eigs.min():.3e})")
        return True


# ----------------------------------------------------------------------
# stencils

def _quad_basis_size(dim):
    return (dim + 1) * (dim + 2) // 2


def _element_stencils(mesh, rings=1):
    """Vertex stencils per element: vertices of all elements sharing a vertex
    with K (rings=1), optionally grown by further adjacency rings."""
    n_v, n_e = mesh.n_vertices, mesh.n_elements
    d1 = mesh.dim + 1
    rows = mesh.elements.ravel()
    cols = np.repeat(np.arange(n_e), d1)
    B = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_v, n_e))
    adj = (B.T @ B).astype(bool)          # element-element vertex adjacency
    reach = adj
    for _ in range(rings - 1):
        reach = (reach @ adj).astype(bool)
    S = (B @ reach).tocsc()               # column K: stencil vertices of K
    return [S.indices[S.indptr[k]:S.indptr[k + 1]] for k in range(n_e)]


def _stencil_of(mesh, K, rings=1):
    """Stencil of one element without building the full table."""
    elems = set()
    for v in mesh.elements[K]:
        elems.update(mesh.vertex_patches[v].tolist())
    for _ in range(rings - 1):
        verts = set()
        for e in elems:
            verts.update(mesh.elements[e].tolist())
        grown = set(elems)
        for v in verts:
            grown.update(mesh.vertex_patches[v].tolist())
        elems = grown
    verts = set()
    for e in elems:
        verts.update(mesh.elements[e].tolist())
    return np.fromiter(sorted(verts), dtype=np.int64)


def _fit_hessian_lstsq(coords, values, centroid, scale, dim):
    """Reference single-stencil fit; returns (H, rank_ok)."""
    xi = (coords - centroid) / scale
    cols = [np.ones(len(xi))]
    if dim == 1:
        cols += [xi[:, 0], xi[:, 0] ** 2]
    else:
        cols += [xi[:, 0], xi[:, 1],
                 xi[:, 0] ** 2, xi[:, 0] * xi[:, 1], xi[:, 1] ** 2]
    A = np.column_stack(cols)
    coef, _, rank, _ = np.linalg.lstsq(A, values, rcond=None)
    ok = rank == A.shape[1]
    if dim == 1:
        H = np.array([[2.0 * coef[2]]])
    else:
        H = np.array([[2.0 * coef[3], coef[4]], [coef[4], 2.0 * coef[5]]])
    return H / scale ** 2, ok


def recover_hessian(mesh, U, K):
    """Hessian of the local least-squares quadratic fit around element K.

    A rank-deficient stencil is widened by one adjacency ring; if it is
    still deficient a zero Hessian is returned with a warning.
    """
    U = np.asarray(U, dtype=float)
    centroid = mesh.vertices[mesh.elements[K]].mean(axis=0)
    for rings in (1, 2):
        sten = _stencil_of(mesh, K, rings=rings)
        coords = mesh.vertices[sten]
        scale = max(np.linalg.norm(coords - centroid, axis=1).max(), 1e-300)
        if len(sten) >= _quad_basis_size(mesh.dim):
            H, ok = _fit_hessian_lstsq(coords, U[sten], centroid, scale, mesh.dim)
            if ok:
                return H
    warnings.warn(f"element {K}: quadratic fit stencil is rank deficient; "
                  "returning zero Hessian", stacklevel=2)
    return np.zeros((mesh.dim, mesh.dim))


# ----------------------------------------------------------------------
# metric construction

def metric_from_hessian(H, floor):
    """det(|H|)^(-1/(d+4)) |H| with eigenvalues of |H| clamped at floor."""
    H = np.asarray(H, dtype=float)
    d = H.shape[0]
    lam, Q = np.linalg.eigh(0.5 * (H + H.T))
    lam = np.maximum(np.abs(lam), floor)
    det = np.prod(lam)
    if det <= 0.0:
        raise ValueError("singular Hessian with zero floor")
    absH = (Q * lam) @ Q.T
    M = det ** (-1.0 / (d + 4)) * absH
    return 0.5 * (M + M.T)


def _metric_from_hessians_batched(H, floor):
    d = H.shape[-1]
    lam, Q = np.linalg.eigh(0.5 * (H + np.swapaxes(H, -1, -2)))
    lam = np.maximum(np.abs(lam), floor)
    det = np.prod(lam, axis=-1)
    if np.any(det <= 0.0):
        raise ValueError("singular Hessian with zero floor")
    absH = np.einsum("kij,kj,klj->kil", Q, lam, Q)
    M = det[:, None, None] ** (-1.0 / (d + 4)) * absH
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def recover_hessians(mesh, U):
    """Recovered Hessians for every element at once, shape (N, d, d).

    Elements are grouped by stencil size so the normal equations solve in
    batched form; rank-deficient stencils fall back to the single-element
    path with ring widening.
    """
    U = np.asarray(U, dtype=float)
    d = mesh.dim
    nb = _quad_basis_size(d)
    stencils = _element_stencils(mesh)
    sizes = np.array([len(s) for s in stencils])
    centroids = mesh.vertices[mesh.elements].mean(axis=1)
    H = np.zeros((mesh.n_elements, d, d))
    todo = []

    for m in np.unique(sizes):
        idx = np.nonzero(sizes == m)[0]
        if m < nb:
            todo.extend(idx.tolist())
            continue
        sten = np.stack([stencils[k] for k in idx])          # (g, m)
        coords = mesh.vertices[sten]                          # (g, m, d)
        rel = coords - centroids[idx][:, None, :]
        scale = np.maximum(np.linalg.norm(rel, axis=2).max(axis=1), 1e-300)
        xi = rel / scale[:, None, None]
        cols = [np.ones(xi.shape[:2])]
        if d == 1:
            cols += [xi[:, :, 0], xi[:, :, 0] ** 2]
        else:
            cols += [xi[:, :, 0], xi[:, :, 1], xi[:, :, 0] ** 2,
                     xi[:, :, 0] * xi[:, :, 1], xi[:, :, 1] ** 2]
        A = np.stack(cols, axis=2)                            # (g, m, nb)
        G = np.einsum("gmi,gmj->gij", A, A)
        rhs = np.einsum("gmi,gm->gi", A, U[sten])
        svals = np.linalg.svd(G, compute_uv=False)
        bad = svals[:, -1] <= 1e-10 * svals[:, 0]
        good = ~bad
        if np.any(good):
            coef = np.linalg.solve(G[good], rhs[good][..., None])[..., 0]
            gi = idx[good]
            if d == 1:
                H[gi, 0, 0] = 2.0 * coef[:, 2] / scale[good] ** 2
            else:
                s2 = scale[good] ** 2
                H[gi, 0, 0] = 2.0 * coef[:, 3] / s2
                H[gi, 0, 1] = coef[:, 4] / s2
                H[gi, 1, 0] = coef[:, 4] / s2
                H[gi, 1, 1] = 2.0 * coef[:, 5] / s2
        todo.extend(idx[bad].tolist())

    for k in todo:  # rare: rank-deficient first-ring stencils
        H[k] = recover_hessian(mesh, U, k)

    return H


def metric_for_state(mesh, U, floor=DEFAULT_FLOOR):
    """Per-element metric from the nodal field U (vectorized over elements)."""
    H = recover_hessians(mesh, U)
    return MetricField(_metric_from_hessians_batched(H, floor), float(floor))


# ----------------------------------------------------------------------
# vertex values and transfer

def vertex_metrics(mesh, metric):
    """Volume-weighted average of adjacent element tensors at each vertex."""
    d = mesh.dim
    vols = mesh.element_volumes()
    acc = np.zeros((mesh.n_vertices, d, d))
    wsum = np.zeros(mesh.n_vertices)
    conn = mesh.elements                                 # (N, d+1)
    contrib = vols[:, None, None] * metric.tensors       # (N, d, d)
    for loc in range(d + 1):
        np.add.at(acc, conn[:, loc], contrib)
        np.add.at(wsum, conn[:, loc], vols)
    return acc / wsum[:, None, None]


def transfer_metric(metric, mesh_a, query_points, floor=None):
    """Metric tensors at arbitrary points, interpolated from mesh_a.

    Element tensors are first averaged to the vertices of mesh_a
    (volume-weighted), interpolated entrywise with the P1 basis, then
    projected back to SPD (symmetrize, clamp eigenvalues at the floor).
    Points outside the domain are clamped to the boundary.
    """
    if floor is None:
        floor = metric.floor
    vm = vertex_metrics(mesh_a, metric)
    ids, bary = locate_points(mesh_a, query_points, clamp=True)
    interp = np.einsum("qi,qijk->qjk", bary, vm[mesh_a.elements[ids]])
    interp = 0.5 * (interp + np.swapaxes(interp, -1, -2))
    lam, Q = np.linalg.eigh(interp)
    lam = np.maximum(lam, floor)
    return np.einsum("qij,qj,qlj->qil", Q, lam, Q)


def dump_metric_csv(metric, path):
    """Per-element upper-triangular entries, for debugging."""
    d = metric.dim
    names = [f"m{i}{j}" for i in range(d) for j in range(i, d)]
    with open(path, "w") as fh:
        fh.write("element," + ",".join(names) + "\n")
        for k, M in enumerate(metric.tensors):
            vals = [M[i, j] for i in range(d) for j in range(i, d)]
            fh.write(str(k) + "," + ",".join(repr(float(v)) for v in vals) + "\n")
