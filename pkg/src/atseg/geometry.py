"""Simplicial meshes (1D intervals, 2D triangulations) with fixed topology.

Meshes here are deformations of each other: vertex positions change, the
element table and vertex patches never do.  All operations are pure; a mesh
instance is an immutable snapshot safe to share between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MeshTanglingError, OutOfDomainError

# boundary classification codes
INTERIOR = 0
EDGE = 1      # on one boundary facet (2D only); slides along it
CORNER = 2    # 2D corner or 1D endpoint; immobile

_FACTORIAL = {1: 1.0, 2: 2.0}


class SimplicialMesh:
    """Vertices plus a fixed (d+1)-column element table.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    vertices : (N_v, d) array
        Vertex coordinates.
    elements : (N, d+1) int array
        Vertex indices per element, positively oriented.
    domain_box : ((lo, hi), ...) per axis
        The box the boundary vertices live on.  Used only for boundary
        classification; interior vertices may sit anywhere inside.
    validate : bool
        Check orientation and boundary placement (skip for trusted
        deformations of an already validated mesh).
    """

    def __init__(self, dim, vertices, elements, domain_box, *, validate=True,
                 _topology=None):
        if dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {dim}")
        self.dim = dim
        vertices = np.ascontiguousarray(vertices, dtype=float).reshape(-1, dim)
        elements = np.ascontiguousarray(elements, dtype=np.int64)
        if elements.ndim != 2 or elements.shape[1] != dim + 1:
            raise ValueError("elements must be (N, d+1)")
        self.vertices = vertices
        self.elements = elements
        self.domain_box = tuple((float(lo), float(hi)) for lo, hi in domain_box)
        if any(hi <= lo for lo, hi in self.domain_box):
            raise ValueError("degenerate domain box")
        self.vertices.flags.writeable = False
        self.elements.flags.writeable = False

        if _topology is not None:
            (self.vertex_patches, self.boundary_kind, self.fixed_mask) = _topology
        else:
            self.vertex_patches = _build_patches(elements, len(vertices))
            self.boundary_kind, self.fixed_mask = _classify_boundary(
                vertices, self.domain_box)
        self._bucket_index = None

        if validate:
            vols = self.element_volumes()
            if np.any(vols <= 0.0):
                bad = int(np.argmin(vols))
                raise MeshTanglingError(
                    f"element {bad} has non-positive volume {vols[bad]:.3e}")
            self._check_boundary_placement()

    # ------------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def element_volumes(self):
        """Signed volumes det(E_K)/d! of all elements."""
        E = self.all_edge_vectors()
        if self.dim == 1:
            det = E[:, 0, 0]
        else:
            det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
        return det / _FACTORIAL[self.dim]

    def all_edge_vectors(self):
        """Edge matrices E_K = [x_1 - x_0, ..., x_d - x_0], shape (N, d, d).

        Column j of E_K is the edge from local vertex 0 to local vertex j+1.
        """
        x = self.vertices[self.elements]                   # (N, d+1, d)
        return np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)

    def diameter(self):
        return math.sqrt(sum((hi - lo) ** 2 for lo, hi in self.domain_box))

    def with_vertices(self, new_vertices, *, validate=True):
        """Same topology and boundary classification, new positions."""
        return SimplicialMesh(
            self.dim, new_vertices, self.elements, self.domain_box,
            validate=validate,
            _topology=(self.vertex_patches, self.boundary_kind, self.fixed_mask))

    # ------------------------------------------------------------------
    def _check_boundary_placement(self):
        tol = 1e-10 * self.diameter()
        v = self.vertices
        for axis, (lo, hi) in enumerate(self.domain_box):
            fixed = self.fixed_mask[:, axis]
            on_face = np.minimum(np.abs(v[:, axis] - lo), np.abs(v[:, axis] - hi))
            if np.any(on_face[fixed] > tol):
                bad = int(np.nonzero(fixed)[0][np.argmax(on_face[fixed])])
                raise ValueError(
                    f"boundary vertex {bad} strayed off its facet by "
                    f"{on_face[bad]:.3e}")

    def _buckets(self):
        if self._bucket_index is None:
            self._bucket_index = _BucketIndex(self)
        return self._bucket_index


@dataclass(frozen=True)
class AffineMapData:
    """Affine map data between one physical element and its computational twin.

    jacobian is the matrix J = Ehat_K @ inv(E_K) mapping physical edge
    vectors onto computational ones; volume is |K| = det(E_K)/d!.
    """
    edge_matrix: np.ndarray
    edge_matrix_ref: np.ndarray
    jacobian: np.ndarray
    volume: float


def build_uniform_mesh(dim, n_per_side, domain_box=None):
    """Uniform mesh of the box: n equal intervals (1D) or 2*n^2 triangles (2D).

    Every 2D cell is split along the same diagonal (the one from the
    lower-right to the upper-left cell corner) so the element count is
    exactly 2*n^2 and connectivity is reproducible.
    """
    if n_per_side < 2:
        raise ValueError("n_per_side must be >= 2")
    if domain_box is None:
        domain_box = ((0.0, 1.0),) * dim
    domain_box = tuple((float(lo), float(hi)) for lo, hi in domain_box)
    if len(domain_box) != dim:
        raise ValueError("domain_box must have one (lo, hi) pair per axis")

    n = int(n_per_side)
    if dim == 1:
        (lo, hi), = domain_box
        verts = np.linspace(lo, hi, n + 1)[:, None]
        elems = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        return SimplicialMesh(1, verts, elems, domain_box)

    (x0, x1), (y0, y1) = domain_box
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    elems = np.empty((2 * n * n, 3), dtype=np.int64)
    k = 0
    for j in range(n):
        for i in range(n):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            elems[k] = (a, b, d)
            elems[k + 1] = (b, c, d)
            k += 2
    return SimplicialMesh(2, verts, elems, domain_box)


def edge_matrices(mesh, comp_mesh, K):
    """Edge matrices and Jacobian of element K of a (physical, computational) pair."""
    if not (0 <= K < mesh.n_elements):
        raise IndexError(f"element index {K} out of range")
    if mesh.elements.shape != comp_mesh.elements.shape or \
            not np.array_equal(mesh.elements, comp_mesh.elements):
        raise ValueError("meshes do not share connectivity")
    conn = mesh.elements[K]
    x = mesh.vertices[conn]
    xi = comp_mesh.vertices[conn]
    E = (x[1:] - x[0]).T
    Ehat = (xi[1:] - xi[0]).T
    det = np.linalg.det(E)
    if det <= 0.0:
        raise MeshTanglingError(f"element {K}: det(E_K) = {det:.3e} <= 0")
    J = Ehat @ np.linalg.inv(E)
    return AffineMapData(E, Ehat, J, det / _FACTORIAL[mesh.dim])


# ----------------------------------------------------------------------
# point location

class _BucketIndex:
    """Uniform background grid binning elements by bounding box.

    Candidate lists are stored as one padded (n_buckets, width) table so a
    whole batch of queries can be tested against its candidates at once.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        v = mesh.vertices
        self.lo = v.min(axis=0)
        span = np.maximum(v.max(axis=0) - self.lo, 1e-300)
        n_cells = max(1, int(round(mesh.n_elements ** (1.0 / mesh.dim))))
        self.shape = (n_cells,) * mesh.dim
        self.inv_h = n_cells / span
        buckets = {}
        x = v[mesh.elements]                       # (N, d+1, d)
        bb_lo = self._cell_of(x.min(axis=1))
        bb_hi = self._cell_of(x.max(axis=1))
        for k in range(mesh.n_elements):
            if mesh.dim == 1:
                for i in range(bb_lo[k, 0], bb_hi[k, 0] + 1):
                    buckets.setdefault(i, []).append(k)
            else:
                for i in range(bb_lo[k, 0], bb_hi[k, 0] + 1):
                    for j in range(bb_lo[k, 1], bb_hi[k, 1] + 1):
                        buckets.setdefault(i * n_cells + j, []).append(k)
        n_buckets = n_cells ** mesh.dim
        width = max(len(ids) for ids in buckets.values())
        # pad with element 0; the mask marks real candidates
        self.table = np.zeros((n_buckets, width), dtype=np.int64)
        self.mask = np.zeros((n_buckets, width), dtype=bool)
        for key, ids in buckets.items():
            self.table[key, :len(ids)] = ids
            self.mask[key, :len(ids)] = True

    def _cell_of(self, pts):
        c = ((pts - self.lo) * self.inv_h).astype(np.int64)
        return np.clip(c, 0, np.array(self.shape) - 1)

    def bucket_of(self, pts):
        c = self._cell_of(pts)
        if self.mesh.dim == 1:
            return c[:, 0]
        return c[:, 0] * self.shape[0] + c[:, 1]


def _barycentric(mesh, elem_ids, pts):
    """Barycentric coordinates of pts (Q,d) in elements elem_ids (Q,)."""
    conn = mesh.elements[elem_ids]
    x = mesh.vertices[conn]                        # (Q, d+1, d)
    E = np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)
    rhs = pts - x[:, 0, :]
    if mesh.dim == 1:
        lam_rest = (rhs / E[:, 0, :])
    else:
        det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
        inv = np.empty_like(E)
        inv[:, 0, 0] = E[:, 1, 1]
        inv[:, 0, 1] = -E[:, 0, 1]
        inv[:, 1, 0] = -E[:, 1, 0]
        inv[:, 1, 1] = E[:, 0, 0]
        inv /= det[:, None, None]
        lam_rest = np.einsum("qij,qj->qi", inv, rhs)
    lam0 = 1.0 - lam_rest.sum(axis=1)
    return np.concatenate([lam0[:, None], lam_rest], axis=1)


def locate_points(mesh, pts, *, tol=None, clamp=False):
    """Find containing elements and barycentric coordinates for many points.

    Returns (elem_ids, bary) with bary of shape (Q, d+1).  Points outside
    the mesh by more than tol raise OutOfDomainError unless clamp=True, in
    which case they are assigned the least-bad element and their barycentric
    coordinates are clipped to the simplex.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if tol is None:
        tol = 1e-10 * mesh.diameter()
    index = mesh._buckets()
    Q = len(pts)

    bucket_ids = index.bucket_of(pts)
    cand = index.table[bucket_ids]                 # (Q, width)
    cand_mask = index.mask[bucket_ids]
    width = cand.shape[1]
    flat_lam = _barycentric(mesh, cand.ravel(), np.repeat(pts, width, axis=0))
    lam = flat_lam.reshape(Q, width, mesh.dim + 1)
    mins = lam.min(axis=2)
    mins[~cand_mask] = -np.inf
    best = np.argmax(mins, axis=1)
    rows = np.arange(Q)
    elem_ids = cand[rows, best]
    bary = lam[rows, best]
    worst = mins[rows, best]

    # rare: points the bucket candidates miss (round-off near bucket seams)
    unresolved = worst < -tol
    if np.any(unresolved):
        sub = np.nonzero(unresolved)[0]
        all_ids = np.arange(mesh.n_elements)
        for q in sub:
            lam_q = _barycentric(mesh, all_ids,
                                 np.repeat(pts[q][None, :], mesh.n_elements, 0))
            mins_q = lam_q.min(axis=1)
            j = int(np.argmax(mins_q))
            elem_ids[q] = j
            bary[q] = lam_q[j]
            worst[q] = mins_q[j]

    outside = worst < -tol
    if np.any(outside):
        if not clamp:
            q = int(np.argmin(worst))
            raise OutOfDomainError(
                f"point {pts[q]} outside mesh (barycentric deficit {worst[q]:.3e})")
        lam = np.clip(bary[outside], 0.0, None)
        bary[outside] = lam / lam.sum(axis=1, keepdims=True)
    else:
        # tiny negative round-off: clip so downstream interpolation stays convex
        np.clip(bary, 0.0, None, out=bary)
        bary /= bary.sum(axis=1, keepdims=True)
    return elem_ids, bary


def locate_point(mesh, x, tol=None):
    """Single-point version of locate_points; returns (element index, bary)."""
    ids, bary = locate_points(mesh, np.asarray(x, dtype=float)[None, :], tol=tol)
    return int(ids[0]), bary[0]


def interpolate_vertex_values(mesh, values, pts, *, clamp=True):
    """Evaluate the P1 interpolant of per-vertex values at arbitrary points."""
    ids, bary = locate_points(mesh, pts, clamp=clamp)
    values = np.asarray(values)
    vert_vals = values[mesh.elements[ids]]         # (Q, d+1, ...)
    return np.einsum("qi,qi...->q...", bary, vert_vals)


# ----------------------------------------------------------------------
# mesh correspondence

def apply_correspondence(physical_mesh, comp_mesh_new, ref_comp_mesh):
    """New physical mesh from the correspondence (computational -> physical).

    The piecewise-linear map defined by comp_mesh_new (domain) and
    physical_mesh (values at the same vertex indices) is evaluated at the
    reference computational vertices.  Boundary vertices are re-projected
    onto their facet; corners stay fixed.
    """
    for other in (comp_mesh_new, ref_comp_mesh):
        if not np.array_equal(physical_mesh.elements, other.elements):
            raise ValueError("meshes do not share connectivity")
    if np.array_equal(comp_mesh_new.vertices, ref_comp_mesh.vertices):
        return physical_mesh.with_vertices(physical_mesh.vertices, validate=False)

    new_pos = interpolate_vertex_values(
        comp_mesh_new, physical_mesh.vertices, ref_comp_mesh.vertices, clamp=True)

    # boundary vertices: pin the facet-normal coordinate exactly
    fixed = physical_mesh.fixed_mask
    new_pos[fixed] = physical_mesh.vertices[fixed]

    vols_ok = physical_mesh.with_vertices(new_pos, validate=False).element_volumes()
    if np.any(vols_ok <= 0.0):
        bad = int(np.argmin(vols_ok))
        raise MeshTanglingError(
            f"correspondence tangled element {bad} (volume {vols_ok[bad]:.3e})")
    return physical_mesh.with_vertices(new_pos, validate=False)


# ----------------------------------------------------------------------
# topology / boundary helpers

def _build_patches(elements, n_vertices):
    """For each vertex, the array of element indices containing it."""
    d1 = elements.shape[1]
    flat = elements.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_v = flat[order]
    elem_of = order // d1
    splits = np.searchsorted(sorted_v, np.arange(n_vertices + 1))
    return tuple(elem_of[splits[i]:splits[i + 1]] for i in range(n_vertices))


def _classify_boundary(vertices, domain_box):
    dim = vertices.shape[1]
    diam = math.sqrt(sum((hi - lo) ** 2 for lo, hi in domain_box))
    tol = 1e-10 * diam
    fixed = np.zeros(vertices.shape, dtype=bool)
    for axis, (lo, hi) in enumerate(domain_box):
        fixed[:, axis] = (np.abs(vertices[:, axis] - lo) <= tol) | \
                         (np.abs(vertices[:, axis] - hi) <= tol)
    n_fixed = fixed.sum(axis=1)
    kind = np.full(len(vertices), INTERIOR, dtype=np.int8)
    if dim == 1:
        kind[n_fixed >= 1] = CORNER
        fixed[:] = fixed  # endpoints pinned
    else:
        kind[n_fixed == 1] = EDGE
        kind[n_fixed >= 2] = CORNER
    return kind, fixed


# ----------------------------------------------------------------------
# export

def save_vtk(mesh, path, point_data=None):
    """Legacy-VTK plain text export (POINTS / CELLS / CELL_TYPES sections).

    point_data: optional {name: (N_v,) array} written as POINT_DATA scalars.
    """
    v = mesh.vertices
    lines = [
        "# vtk DataFile Version 3.0",
        "atseg mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    pad = np.zeros((mesh.n_vertices, 3))
    pad[:, :mesh.dim] = v
    lines += [" ".join(repr(float(c)) for c in row) for row in pad]
    d1 = mesh.dim + 1
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (d1 + 1)}")
    lines += [f"{d1} " + " ".join(str(int(i)) for i in row) for row in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    cell_type = "3" if mesh.dim == 1 else "5"
    lines += [cell_type] * mesh.n_elements
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, arr in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [repr(float(x)) for x in np.asarray(arr)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_csv(mesh, base_path):
    """Flat CSV export: <base>_vertices.csv and <base>_elements.csv."""
    base = str(base_path)
    vert_path = base + "_vertices.csv"
    elem_path = base + "_elements.csv"
    header_v = ",".join(f"x{a}" for a in range(mesh.dim))
    with open(vert_path, "w") as fh:
        fh.write(header_v + "\n")
        for row in mesh.vertices:
            fh.write(",".join(repr(float(c)) for c in row) + "\n")
    header_e = ",".join(f"v{a}" for a in range(mesh.dim + 1))
    with open(elem_path, "w") as fh:
        fh.write(header_e + "\n")
        for row in mesh.elements:
            fh.write(",".join(str(int(i)) for i in row) + "\n")
    return vert_path, elem_path
