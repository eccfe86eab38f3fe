"""Fifth-order, three-stage, stiffly accurate implicit Runge-Kutta stepping
for M(t) y' = f(t, y), with adaptive step size from a two-step controller.

The stage equations are solved by simplified Newton: the iteration matrix is
assembled from a frozen Jacobian and decoupled into one real and one complex
linear system through the eigen-decomposition of the inverse coefficient
matrix.  Jacobians and factorizations are reused across stages and steps
until convergence degrades.  The error estimate is the classical embedded
third-order one, damped by a solve with the real iteration matrix (repeated
once on rejected first steps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IntegratorFailureError

# ----------------------------------------------------------------------
# tableau (3-stage Radau IIA, order 5)

_S6 = math.sqrt(6.0)
RADAU_C = np.array([(4.0 - _S6) / 10.0, (4.0 + _S6) / 10.0, 1.0])
RADAU_A = np.array([
    [(88.0 - 7.0 * _S6) / 360.0, (296.0 - 169.0 * _S6) / 1800.0,
     (-2.0 + 3.0 * _S6) / 225.0],
    [(296.0 + 169.0 * _S6) / 1800.0, (88.0 + 7.0 * _S6) / 360.0,
     (-2.0 - 3.0 * _S6) / 225.0],
    [(16.0 - _S6) / 36.0, (16.0 + _S6) / 36.0, 1.0 / 9.0],
])
RADAU_B = RADAU_A[-1]

_AINV = np.linalg.inv(RADAU_A)


def _decompose_ainv():
    lam, vec = np.linalg.eig(_AINV)
    i_real = int(np.argmin(np.abs(lam.imag)))
    i_plus = int(np.argmax(lam.imag))
    i_minus = ({0, 1, 2} - {i_real, i_plus}).pop()
    order = [i_real, i_plus, i_minus]
    T = vec[:, order].astype(complex)
    T[:, 0] = T[:, 0].real / np.linalg.norm(T[:, 0].real)
    T[:, 2] = np.conj(T[:, 1])
    Tinv = np.linalg.inv(T)
    return float(lam[i_real].real), complex(lam[i_plus]), T, Tinv


_GAMMA, _LAMBDA_C, _T, _TINV = _decompose_ainv()


def _embedded_coeffs():
    # third-order embedded method with weight 1/gamma on the step-start slope
    b0 = 1.0 / _GAMMA
    V = np.vstack([np.ones(3), RADAU_C, RADAU_C ** 2])
    rhs = np.array([1.0 - b0, 0.5, 1.0 / 3.0])
    bhat = np.linalg.solve(V, rhs)
    return _GAMMA * np.linalg.solve(RADAU_A.T, bhat - RADAU_B)


_DD = _embedded_coeffs()


def stability_function(z):
    """R(z) = 1 + z b^T (I - z A)^{-1} 1 of the three-stage method."""
    mat = np.eye(3, dtype=complex) - z * RADAU_A
    return complex(1.0 + z * RADAU_B @ np.linalg.solve(mat, np.ones(3)))


# ----------------------------------------------------------------------
# configuration and the ODE protocol

@dataclass(frozen=True)
class RadauConfig:
    rtol: float = 1e-6
    atol: float = 1e-9
    dt_min: float = 1e-14
    dt_max: float = math.inf
    newton_tol: float = 1e-2
    max_newton: int = 10
    safety: float = 0.9
    order_exponent: float = 1.0 / 6.0
    two_step_exponent: float = 0.08
    max_growth: float = 5.0
    min_shrink: float = 0.2
    jac_reuse_theta: float = 0.3

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")


class OdeSystem:
    """Right-hand side bundle for M(t) y' = f(t, y).

    mass may be None (identity), a constant matrix, or a callable t -> matrix;
    jac returns d f / d y (dense array or sparse matrix).
    """

    def __init__(self, f, jac, mass=None):
        self.f = f
        self._jac = jac
        self._mass = mass

    def jac(self, t, y):
        return self._jac(t, y)

    def mass(self, t):
        if callable(self._mass):
            return self._mass(t)
        return self._mass


@dataclass
class StepResult:
    y_next: np.ndarray | None
    error: float
    converged: bool
    n_newton: int

    def __iter__(self):  # allow (y_next, err) unpacking
        yield self.y_next
        yield self.error


@dataclass
class IntegrationStats:
    n_steps: int = 0
    n_rejected: int = 0
    n_newton_failures: int = 0
    n_jacobians: int = 0
    n_factorizations: int = 0
    dt_smallest: float = math.inf
    dt_largest: float = 0.0
    last_dt: float = 0.0


@dataclass
class IntegrationResult:
    y: np.ndarray
    stats: IntegrationStats


# ----------------------------------------------------------------------
# linear algebra helpers

def _is_sparse(m):
    return sp.issparse(m)


class _Factorized:
    def __init__(self, matrix):
        if _is_sparse(matrix):
            self._solve = spla.splu(matrix.tocsc()).solve
        else:
            lu = scipy.linalg.lu_factor(matrix)
            self._solve = lambda rhs: scipy.linalg.lu_solve(lu, rhs)

    def __call__(self, rhs):
        return self._solve(rhs)


def _combine(scale, mass, jac):
    """scale * M - J in a format matching the operands."""
    if mass is None:
        n = jac.shape[0]
        eye = sp.identity(n, format="csr") if _is_sparse(jac) else np.eye(n)
        mass = eye
    out = scale * mass - jac
    if _is_sparse(out):
        return out.tocsc()
    return np.asarray(out)


class _Workspace:
    """Jacobian, factorizations, and cached slope shared across steps."""

    def __init__(self, ode, config, stats=None):
        self.ode = ode
        self.config = config
        self.stats = stats if stats is not None else IntegrationStats()
        self.jac = None
        self.jac_fresh = False
        self.mass_ref = None
        self.h_fact = None
        self.solve_real = None
        self.solve_cplx = None
        self.f0 = None
        self.f0_key = None
        self.theta_last = 0.0

    def slope_at(self, t, y):
        key = (t, id(y))
        if self.f0_key != key:
            self.f0 = np.asarray(self.ode.f(t, y), dtype=float)
            self.f0_key = key
        return self.f0

    def refresh_jacobian(self, t, y):
        self.jac = self.ode.jac(t, y)
        self.jac_fresh = True
        self.h_fact = None
        self.stats.n_jacobians += 1

    def ensure_factorizations(self, t, y, h, mass_bar):
        if self.jac is None:
            self.refresh_jacobian(t, y)
        if (self.h_fact == h and self.mass_ref is mass_bar
                and self.solve_real is not None):
            return
        self.solve_real = _Factorized(_combine(_GAMMA / h, mass_bar, self.jac))
        cscale = _LAMBDA_C / h
        jc = self.jac.astype(complex) if not _is_sparse(self.jac) else self.jac
        if mass_bar is None:
            mat_c = _combine(cscale, None, jc)
        else:
            mat_c = cscale * mass_bar.astype(complex) - jc
            if _is_sparse(mat_c):
                mat_c = mat_c.tocsc()
        self.solve_cplx = _Factorized(mat_c)
        self.h_fact = h
        self.mass_ref = mass_bar
        self.stats.n_factorizations += 1


def _scaled_rms(v, scale):
    return float(np.sqrt(np.mean((v / scale) ** 2)))


# ----------------------------------------------------------------------
# one step

def radau_step(ode, t, y, dt, config, workspace=None, *,
               first_or_rejected=True):
    """Attempt one step of size dt from (t, y).

    Returns a StepResult: the order-5 solution at t + dt and the scalar
    weighted error estimate.  converged=False signals Newton divergence
    (caller halves dt and retries).
    """
    ws = workspace if workspace is not None else _Workspace(ode, config)
    y = np.asarray(y, dtype=float)
    n = y.size
    scale = config.atol + config.rtol * np.abs(y)

    mass_bar = ode.mass(t)
    stage_mass = []
    for ci in RADAU_C:
        stage_mass.append(ode.mass(t + ci * dt))
    ws.ensure_factorizations(t, y, dt, mass_bar)

    Z = np.zeros((3, n))
    dz_prev = None
    theta = 0.0
    converged = False
    blew_up = False
    for it in range(config.max_newton):
        R = np.empty((3, n))
        AinvZ = _AINV @ Z
        for i in range(3):
            ti = t + RADAU_C[i] * dt
            fi = np.asarray(ode.f(ti, y + Z[i]), dtype=float)
            if not np.all(np.isfinite(fi)):
                blew_up = True
                break
            mz = AinvZ[i] / dt if stage_mass[i] is None else \
                stage_mass[i] @ (AinvZ[i] / dt)
            R[i] = mz - fi
        if blew_up:
            break
        V = -(_TINV @ R.astype(complex))
        dW0 = ws.solve_real(V[0].real)
        dW1 = ws.solve_cplx(V[1])
        dZ = (np.outer(_T[:, 0].real, dW0)
              + 2.0 * np.real(np.outer(_T[:, 1], dW1))).reshape(3, n)
        Z += dZ
        dz_norm = _scaled_rms(dZ, scale)
        if dz_norm == 0.0:
            converged = True
            break
        if dz_prev is not None:
            theta = dz_norm / dz_prev
            if theta >= 0.99:
                break  # diverging
            if theta / (1.0 - theta) * dz_norm <= config.newton_tol:
                converged = True
                break
        dz_prev = dz_norm
    ws.theta_last = theta

    if not converged:
        if not ws.jac_fresh and not blew_up:
            ws.refresh_jacobian(t, y)
            return radau_step(ode, t, y, dt, config, ws,
                              first_or_rejected=first_or_rejected)
        return StepResult(None, math.inf, False, it + 1)

    y_next = y + Z[2]

    # embedded error estimate, damped by the real iteration matrix
    f0 = ws.slope_at(t, y)
    if not np.all(np.isfinite(f0)):
        return StepResult(None, math.inf, False, it + 1)
    ddz = (_DD @ Z) / dt
    rhs = f0 + (ddz if mass_bar is None else mass_bar @ ddz)
    est = ws.solve_real(rhs)
    err = _scaled_rms(est, scale)
    if err >= 1.0 and first_or_rejected:
        f_retry = np.asarray(ode.f(t, y + est), dtype=float)
        if np.all(np.isfinite(f_retry)):
            est = ws.solve_real(f_retry + (ddz if mass_bar is None
                                           else mass_bar @ ddz))
            err = _scaled_rms(est, scale)
    if not math.isfinite(err):
        return StepResult(None, math.inf, False, it + 1)
    return StepResult(y_next, err, True, it + 1)


# ----------------------------------------------------------------------
# step-size control

def step_controller(dt, err, err_prev=None, config=RadauConfig(), *,
                    rejected=False):
    """Next step size from the current (and previous) weighted error.

    dt * safety * (1/err)^(1/6), times the two-step factor
    (err_prev/err)^0.08 once two accepted steps exist; growth capped."""
    err = max(err, 1e-300)
    fac = config.safety * err ** (-config.order_exponent)
    if err_prev is not None and not rejected:
        fac *= (max(err_prev, 1e-300) / err) ** config.two_step_exponent
    fac = min(config.max_growth, max(config.min_shrink, fac))
    return float(np.clip(dt * fac, config.dt_min, config.dt_max))


# ----------------------------------------------------------------------
# interval driver

def integrate_interval(ode, t0, t1, y0, config, *, observer=None,
                       initial_dt=None, workspace=None):
    """March from t0 to t1, landing exactly on t1.

    observer(t, y) runs after every accepted step.  Raises
    IntegratorFailureError when the step size underflows dt_min."""
    y = np.asarray(y0, dtype=float).copy()
    if t1 == t0:
        return IntegrationResult(y, IntegrationStats())
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    ws = workspace if workspace is not None else _Workspace(ode, config)
    stats = ws.stats
    span = t1 - t0
    h = initial_dt if initial_dt else min(config.dt_max, 0.01 * span)
    h = max(h, config.dt_min)
    t = t0
    err_prev = None
    last_rejected = True  # treat the first step conservatively
    while t < t1 - 1e-14 * span:
        h = min(h, t1 - t)
        if h < config.dt_min:
            raise IntegratorFailureError(
                f"step size {h:.3e} under dt_min at t = {t:.6g}", t=t, y=y, dt=h)
        result = radau_step(ode, t, y, h, config, ws,
                            first_or_rejected=last_rejected)
        if not result.converged:
            stats.n_newton_failures += 1
            h = max(h / 2.0, config.dt_min / 2.0)
            last_rejected = True
            if h < config.dt_min:
                raise IntegratorFailureError(
                    f"stage equations stopped converging at t = {t:.6g}",
                    t=t, y=y, dt=h)
            continue
        if result.error > 1.0:
            stats.n_rejected += 1
            h = step_controller(h, result.error, None, config, rejected=True)
            last_rejected = True
            continue
        # accepted
        t = t1 if t1 - (t + h) < 1e-14 * span else t + h
        y = result.y_next
        stats.n_steps += 1
        stats.dt_smallest = min(stats.dt_smallest, h)
        stats.dt_largest = max(stats.dt_largest, h)
        stats.last_dt = h
        ws.jac_fresh = False
        if ws.theta_last > config.jac_reuse_theta:
            ws.jac = None  # too slow: rebuild next step
        ws.f0_key = None
        if observer is not None:
            observer(t, y)
        h_next = step_controller(h, result.error, err_prev, config)
        err_prev = result.error
        last_rejected = False
        # avoid refactorizations for marginal step-size growth
        if ws.h_fact is not None and 1.0 <= h_next / h <= 1.2:
            h_next = h
        h = h_next
    return IntegrationResult(y, stats)
