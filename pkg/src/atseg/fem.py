"""Linear finite elements for the phase-field gradient flow on a moving mesh.

Unknowns are vertex values (U, Phi) of the grey level u_h and the edge
indicator phi_h.  The semidiscrete system is

    M(X) dU/dt   = F(Xdot, X, Phi, U),
    M(X) dPhi/dt = G(Xdot, X, Phi, U),

where the right-hand sides carry the diffusion, reaction, and fidelity terms
of the flow plus the convection correction (grad uh . Xdot, psi_j) that
appears because the basis functions ride on the moving vertices.

Quadrature policy: products of P1 factors are integrated exactly through the
element mass matrix; data terms sample g with a degree-4 rule; the discrete
energy uses vertex quadrature for its interpolated squares, exactly as the
discrete functional is defined.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# degree-4 rules on the reference simplex, weights normalized to sum to 1
_GAUSS3_T = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
_GAUSS3_W = np.array([5.0, 8.0, 5.0]) / 18.0

_B1, _W1 = 0.445948490915965, 0.223381589678011
_B2, _W2 = 0.091576213509771, 0.109951743655322
_TRI6_BARY = np.array([
    [1 - 2 * _B1, _B1, _B1],
    [_B1, 1 - 2 * _B1, _B1],
    [_B1, _B1, 1 - 2 * _B1],
    [1 - 2 * _B2, _B2, _B2],
    [_B2, 1 - 2 * _B2, _B2],
    [_B2, _B2, 1 - 2 * _B2],
])
_TRI6_W = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

_SEG_BARY = np.column_stack([1 - _GAUSS3_T, _GAUSS3_T])

_MREF = {
    1: np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0,
    2: np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0,
}
_REF_GRADS = {
    1: np.array([[-1.0], [1.0]]),
    2: np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
}


@dataclass(frozen=True)
class SegParams:
    """Model weights and run controls of the segmentation flow.

    alpha, beta, gamma weight smoothing, edge length, and fidelity; k_eps
    guards the degenerate diffusion; eps is the edge width; L the input
    scaling; grad_cr the critical gradient the scaling targets.
    """
    alpha: float
    beta: float
    gamma: float
    k_eps: float
    eps: float
    L: float = 1.0
    grad_cr: float = 3e3
    T: float = 1.0
    snapshot_every: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "k_eps", "eps", "T"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.L < 1.0:
            raise ValueError("L must be >= 1")
        if self.k_eps >= self.eps:
            warnings.warn(
                f"k_eps = {self.k_eps:g} is not small against eps = {self.eps:g}; "
                "the degeneracy guard should be o(eps)", stacklevel=2)


@dataclass
class NodalState:
    """Vertex-aligned unknowns; Phi is monitored against [-0.05, 1.05]."""
    U: np.ndarray
    Phi: np.ndarray

    PHI_SLACK = 0.05

    def phi_in_bounds(self):
        return (self.Phi.min() >= -self.PHI_SLACK
                and self.Phi.max() <= 1.0 + self.PHI_SLACK)


class ElementBasis:
    """Per-element P1 data on a fixed vertex configuration."""

    def __init__(self, mesh, vertices=None):
        self.conn = mesh.elements
        self.dim = d = mesh.dim
        v = mesh.vertices if vertices is None else vertices
        self.vertices = v
        x = v[self.conn]                                     # (N, d+1, d)
        E = np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)
        if d == 1:
            det = E[:, 0, 0]
            Einv = 1.0 / E
        else:
            det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
            Einv = np.empty_like(E)
            Einv[:, 0, 0] = E[:, 1, 1]
            Einv[:, 0, 1] = -E[:, 0, 1]
            Einv[:, 1, 0] = -E[:, 1, 0]
            Einv[:, 1, 1] = E[:, 0, 0]
            Einv /= det[:, None, None]
        self.vols = det / (1.0 if d == 1 else 2.0)
        # grads[k, j] = physical gradient of basis j on element k
        self.grads = np.einsum("jr,krd->kjd", _REF_GRADS[d], Einv)
        self.m_loc = self.vols[:, None, None] * _MREF[d]
        bary = _SEG_BARY if d == 1 else _TRI6_BARY
        self.quad_w = _GAUSS3_W if d == 1 else _TRI6_W
        self.quad_bary = bary                                # (nq, d+1)
        self.quad_pts = np.einsum("qj,kjd->kqd", bary, x)    # (N, nq, d)

    def gradient_of(self, nodal):
        """Constant per-element gradient of a P1 field, shape (N, d)."""
        return np.einsum("kj,kjd->kd", nodal[self.conn], self.grads)

    def scatter(self, local):
        """Accumulate per-element local vectors (N, d+1) into vertices."""
        out = np.zeros(self.vertices.shape[0])
        for j in range(self.dim + 1):
            np.add.at(out, self.conn[:, j], local[:, j])
        return out

    def scatter_matrix(self, local):
        """Assemble per-element (d+1, d+1) blocks into a CSR matrix."""
        d1 = self.dim + 1
        rows = np.repeat(self.conn, d1, axis=1).ravel()
        cols = np.tile(self.conn, (1, d1)).ravel()
        n = self.vertices.shape[0]
        return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


# ----------------------------------------------------------------------
# matrices

def mass_matrix(mesh, vertices=None):
    """Consistent P1 mass matrix M(X); row sums are the lumped volumes."""
    basis = ElementBasis(mesh, vertices)
    return basis.scatter_matrix(basis.m_loc)


def stiffness_matrix(mesh, vertices=None):
    """P1 stiffness matrix with unit coefficient."""
    basis = ElementBasis(mesh, vertices)
    local = np.einsum("k,kid,kjd->kij", basis.vols, basis.grads, basis.grads)
    return basis.scatter_matrix(local)


def lumped_weights(mesh, vertices=None):
    """Integrals of the basis functions (the lumped vertex volumes)."""
    basis = ElementBasis(mesh, vertices)
    d1 = mesh.dim + 1
    return basis.scatter(np.repeat(basis.vols[:, None] / d1, d1, axis=1))


class MassInterpolator:
    """Exact M(X(s)) for vertices moving linearly from X0 to X1.

    Element volumes are polynomials of degree <= dim in s, so the mass
    matrix data interpolates through its values at s = 0, 1/2, 1.
    """

    def __init__(self, mesh, x_start, x_end):
        self.m0 = mass_matrix(mesh, x_start)
        self.m_half = mass_matrix(mesh, 0.5 * (x_start + x_end))
        self.m1 = mass_matrix(mesh, x_end)

    def __call__(self, s):
        l0 = (2 * s - 1) * (s - 1)
        lh = 4 * s * (1 - s)
        l1 = s * (2 * s - 1)
        out = self.m0.copy()
        out.data = l0 * self.m0.data + lh * self.m_half.data + l1 * self.m1.data
        return out


# ----------------------------------------------------------------------
# right-hand sides

def _data_term(basis, g_field, scale):
    """Per-element vector of scale * integral(g * psi_j)."""
    pts = basis.quad_pts.reshape(-1, basis.dim)
    g_q = np.asarray(g_field.eval(pts)).reshape(basis.quad_pts.shape[:2])
    w_lam = basis.quad_w[:, None] * basis.quad_bary       # (nq, d+1)
    return scale * basis.vols[:, None] * np.einsum("kq,qj->kj", g_q, w_lam)


def _convection_vectors(basis, mesh_velocity):
    """b[k, j] = integral over K of Xdot * psi_j; None velocity -> None."""
    if mesh_velocity is None:
        return None
    xd = np.asarray(mesh_velocity)[basis.conn]            # (N, d+1, d)
    return np.einsum("kij,kid->kjd", basis.m_loc, xd)


def rhs_u(mesh, mesh_velocity, U, Phi, g_field, params, *, basis=None):
    """Assembled F: degenerate diffusion, fidelity against L*g, convection."""
    basis = basis or ElementBasis(mesh)
    U = np.asarray(U, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    phi_e = Phi[basis.conn]
    coef = params.k_eps * basis.vols + np.einsum(
        "ki,kij,kj->k", phi_e, basis.m_loc, phi_e)        # int (k_eps + phi^2)
    grad_u = basis.gradient_of(U)
    local = -params.alpha * coef[:, None] * np.einsum(
        "kd,kjd->kj", grad_u, basis.grads)
    local -= params.gamma * np.einsum("kij,ki->kj", basis.m_loc, U[basis.conn])
    local += _data_term(basis, g_field, params.gamma * params.L)
    b = _convection_vectors(basis, mesh_velocity)
    if b is not None:
        local += np.einsum("kd,kjd->kj", grad_u, b)
    return basis.scatter(local)


def rhs_phi(mesh, mesh_velocity, U, Phi, params, *, basis=None):
    """Assembled G: phase diffusion, gradient-driven decay, recovery, convection."""
    basis = basis or ElementBasis(mesh)
    U = np.asarray(U, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    grad_u = basis.gradient_of(U)
    grad_u_sq = np.einsum("kd,kd->k", grad_u, grad_u)
    grad_phi = basis.gradient_of(Phi)
    m_phi = np.einsum("kij,ki->kj", basis.m_loc, Phi[basis.conn])

    local = -2.0 * params.beta * params.eps * basis.vols[:, None] * np.einsum(
        "kd,kjd->kj", grad_phi, basis.grads)
    local -= params.alpha * grad_u_sq[:, None] * m_phi
    d1 = basis.dim + 1
    local += (params.beta / (2 * params.eps)) * (
        basis.vols[:, None] / d1 - m_phi)
    b = _convection_vectors(basis, mesh_velocity)
    if b is not None:
        local += np.einsum("kd,kjd->kj", grad_phi, b)
    return basis.scatter(local)


def flow_rhs(mesh, mesh_velocity, U, Phi, g_field, params, *, basis=None):
    """Stacked (F, G) sharing one basis build."""
    basis = basis or ElementBasis(mesh)
    return np.concatenate([
        rhs_u(mesh, mesh_velocity, U, Phi, g_field, params, basis=basis),
        rhs_phi(mesh, mesh_velocity, U, Phi, params, basis=basis),
    ])


def flow_jacobian(mesh, mesh_velocity, U, Phi, params, *, basis=None):
    """Sparse derivative of (F, G) with respect to (U, Phi)."""
    basis = basis or ElementBasis(mesh)
    U = np.asarray(U, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    phi_e = Phi[basis.conn]
    m_phi = np.einsum("kij,ki->kj", basis.m_loc, phi_e)
    grad_u = basis.gradient_of(U)
    grad_u_sq = np.einsum("kd,kd->k", grad_u, grad_u)
    coef = params.k_eps * basis.vols + np.einsum("ki,ki->k", phi_e, m_phi)
    gg = np.einsum("kid,kjd->kij", basis.grads, basis.grads)

    a_diff = coef[:, None, None] * gg
    d_u = grad_u_sq[:, None, None] * basis.m_loc
    stiff = basis.vols[:, None, None] * gg
    # dF_j/dPhi_l and its phi-equation mirror
    du_dlam = np.einsum("kd,kjd->kj", grad_u, basis.grads)
    uphi = -2.0 * params.alpha * np.einsum("kj,kl->kjl", du_dlam, m_phi)
    phiu = -2.0 * params.alpha * np.einsum("kj,kl->kjl", m_phi, du_dlam)

    conv = None
    b = _convection_vectors(basis, mesh_velocity)
    if b is not None:
        conv = basis.scatter_matrix(
            np.einsum("kjd,kld->kjl", b, basis.grads))

    M = basis.scatter_matrix(basis.m_loc)
    J_uu = -params.alpha * basis.scatter_matrix(a_diff) - params.gamma * M
    J_pp = (-2.0 * params.beta * params.eps * basis.scatter_matrix(stiff)
            - params.alpha * basis.scatter_matrix(d_u)
            - (params.beta / (2 * params.eps)) * M)
    if conv is not None:
        J_uu = J_uu + conv
        J_pp = J_pp + conv
    J_up = basis.scatter_matrix(uphi)
    J_pu = basis.scatter_matrix(phiu)
    return sp.bmat([[J_uu, J_up], [J_pu, J_pp]], format="csr")


# ----------------------------------------------------------------------
# the discrete energy

@dataclass(frozen=True)
class ATEnergy:
    """The three contributions of the discrete segmentation energy."""
    diffusion: float
    phase: float
    fidelity: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total",
                           self.diffusion + self.phase + self.fidelity)


def at_energy(mesh, U, Phi, g_field, params, *, basis=None):
    """Discrete energy with vertex quadrature on the interpolated squares.

    The (1 - phi)^2 and (u - L g)^2 terms integrate the nodal interpolant
    of the squared quantity (pi_h), matching the discrete functional the
    flow descends.
    """
    basis = basis or ElementBasis(mesh)
    U = np.asarray(U, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    phi_e = Phi[basis.conn]
    coef = params.k_eps * basis.vols + np.einsum(
        "ki,kij,kj->k", phi_e, basis.m_loc, phi_e)
    grad_u_sq = np.einsum("kd,kd->k", basis.gradient_of(U), basis.gradient_of(U))
    diffusion = 0.5 * params.alpha * float(coef @ grad_u_sq)

    grad_phi = basis.gradient_of(Phi)
    grad_phi_sq = np.einsum("kd,kd->k", grad_phi, grad_phi)
    w = _lumped_from_basis(basis)
    g_nodes = np.asarray(g_field.eval(basis.vertices))
    phase = params.beta * (params.eps * float(basis.vols @ grad_phi_sq)
                           + float(w @ (1.0 - Phi) ** 2) / (4 * params.eps))
    fidelity = 0.5 * params.gamma * float(w @ (U - params.L * g_nodes) ** 2)
    return ATEnergy(diffusion, phase, fidelity)


def at_energy_consistent(mesh, U, Phi, g_field, params, *, basis=None):
    """Energy with the same quadrature the right-hand sides use.

    Its exact negative gradient is (F, G) on a frozen mesh, which the tests
    verify by finite differences.
    """
    basis = basis or ElementBasis(mesh)
    U = np.asarray(U, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    phi_e = Phi[basis.conn]
    coef = params.k_eps * basis.vols + np.einsum(
        "ki,kij,kj->k", phi_e, basis.m_loc, phi_e)
    grad_u_sq = np.einsum("kd,kd->k", basis.gradient_of(U), basis.gradient_of(U))
    diffusion = 0.5 * params.alpha * float(coef @ grad_u_sq)

    grad_phi = basis.gradient_of(Phi)
    grad_phi_sq = np.einsum("kd,kd->k", grad_phi, grad_phi)
    one_minus = 1.0 - phi_e
    pen = np.einsum("ki,kij,kj->k", one_minus, basis.m_loc, one_minus)
    phase = params.beta * (params.eps * float(basis.vols @ grad_phi_sq)
                           + float(pen.sum()) / (4 * params.eps))

    u_e = U[basis.conn]
    uMu = np.einsum("ki,kij,kj->k", u_e, basis.m_loc, u_e)
    gpsi = _data_term(basis, g_field, 1.0)                # int g psi_j per element
    ug = np.einsum("kj,kj->k", u_e, gpsi)
    pts = basis.quad_pts.reshape(-1, basis.dim)
    g_q = np.asarray(g_field.eval(pts)).reshape(basis.quad_pts.shape[:2])
    gg = basis.vols * np.einsum("kq,q->k", g_q ** 2, basis.quad_w)
    fidelity = 0.5 * params.gamma * float(
        (uMu - 2 * params.L * ug + params.L ** 2 * gg).sum())
    return ATEnergy(diffusion, phase, fidelity)


def _lumped_from_basis(basis):
    d1 = basis.dim + 1
    out = np.zeros(basis.vertices.shape[0])
    for j in range(d1):
        np.add.at(out, basis.conn[:, j], basis.vols / d1)
    return out
