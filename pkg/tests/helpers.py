"""Shared test utilities: randomized meshes and brute-force oracles."""

import numpy as np

from atseg.geometry import build_uniform_mesh


def perturbed_mesh(dim, n, amplitude, seed=0):
    """Uniform mesh with interior vertices jiggled (orientation preserved)."""
    mesh = build_uniform_mesh(dim, n)
    rng = np.random.default_rng(seed)
    v = mesh.vertices.copy()
    h = 1.0 / n
    shift = rng.uniform(-amplitude * h, amplitude * h, v.shape)
    shift[mesh.fixed_mask] = 0.0
    return mesh.with_vertices(v + shift)


def random_spd_tensors(n, dim, seed, lam_lo=0.5, lam_hi=5.0):
    """Random SPD matrices with eigenvalues in [lam_lo, lam_hi]."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n, dim, dim))
    for k in range(n):
        A = rng.normal(size=(dim, dim))
        Q, _ = np.linalg.qr(A)
        lam = rng.uniform(lam_lo, lam_hi, dim)
        out[k] = (Q * lam) @ Q.T
    return out


def _dense_quadrature(dim, order=12):
    """High-order barycentric quadrature on the reference simplex.

    1D: Gauss-Legendre.  2D: Duffy-collapsed tensor Gauss grid.  Weights sum
    to one (integrals get multiplied by the element volume).
    """
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    if dim == 1:
        bary = np.column_stack([1 - t, t])
        return bary, w
    U, V = np.meshgrid(t, t, indexing="ij")
    WU, WV = np.meshgrid(w, w, indexing="ij")
    xi = (U * (1 - V)).ravel()
    eta = V.ravel()
    weights = (WU * WV * (1 - V)).ravel() * 2.0   # reference area is 1/2
    bary = np.column_stack([1 - xi - eta, xi, eta])
    return bary, weights


def brute_force_rhs(mesh, mesh_velocity, U, Phi, g_field, params):
    """Quadrature-from-scratch assembly of (F, G): the independent oracle.

    Evaluates the actual weak-form integrands of the flow with a dense
    Gauss rule per element; exact for polynomial data.
    """
    dim = mesh.dim
    bary, w = _dense_quadrature(dim)
    conn = mesh.elements
    F = np.zeros(mesh.n_vertices)
    G = np.zeros(mesh.n_vertices)
    U = np.asarray(U, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    for k in range(mesh.n_elements):
        ids = conn[k]
        x = mesh.vertices[ids]                      # (d+1, d)
        E = (x[1:] - x[0]).T
        det = np.linalg.det(E)
        vol = det / (1.0 if dim == 1 else 2.0)
        ref_grads = np.array([[-1.0], [1.0]]) if dim == 1 else \
            np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        grads = ref_grads @ np.linalg.inv(E)        # (d+1, d)
        grad_u = U[ids] @ grads
        grad_phi = Phi[ids] @ grads
        pts = bary @ x                              # (nq, d)
        u_q = bary @ U[ids]
        phi_q = bary @ Phi[ids]
        g_q = np.asarray(g_field.eval(pts))
        if mesh_velocity is None:
            xdot_q = np.zeros_like(pts)
        else:
            xdot_q = bary @ np.asarray(mesh_velocity)[ids]
        for j in range(dim + 1):
            psi_q = bary[:, j]
            integrand_f = (-params.alpha * (params.k_eps + phi_q ** 2)
                           * (grads[j] @ grad_u)
                           - params.gamma * (u_q - params.L * g_q) * psi_q
                           + (xdot_q @ grad_u) * psi_q)
            F[ids[j]] += vol * float(w @ integrand_f)
            integrand_g = (-2 * params.beta * params.eps * (grads[j] @ grad_phi)
                           - params.alpha * (grad_u @ grad_u) * phi_q * psi_q
                           + params.beta / (2 * params.eps) * (1 - phi_q) * psi_q
                           + (xdot_q @ grad_phi) * psi_q)
            G[ids[j]] += vol * float(w @ integrand_g)
    return F, G
