import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from atseg.errors import IntegratorFailureError
from atseg.timeint import (
    RADAU_A,
    RADAU_B,
    RADAU_C,
    IntegrationResult,
    OdeSystem,
    RadauConfig,
    _Workspace,
    integrate_interval,
    radau_step,
    stability_function,
    step_controller,
)

DECAY = OdeSystem(f=lambda t, y: -y, jac=lambda t, y: -np.eye(1))


def fixed_step_integrate(ode, h, t_end, y0, cfg=None):
    cfg = cfg or RadauConfig(rtol=1e-12, atol=1e-14)
    ws = _Workspace(ode, cfg)
    y = np.asarray(y0, dtype=float)
    t = 0.0
    for _ in range(int(round(t_end / h))):
        res = radau_step(ode, t, y, h, cfg, ws)
        assert res.converged
        y = res.y_next
        t += h
        ws.f0_key = None
    return y


# ----------------------------------------------------------------------
# tableau sanity

def test_order_conditions():
    for k in range(1, 6):
        assert RADAU_B @ RADAU_C ** (k - 1) == pytest.approx(1.0 / k, rel=1e-13)
    for k in range(1, 4):  # stage order 3
        assert np.allclose(RADAU_A @ RADAU_C ** (k - 1), RADAU_C ** k / k,
                           atol=1e-14)


def test_l_stability():
    assert abs(stability_function(-1e6)) < 1e-5
    assert abs(stability_function(-1e12)) < 1e-10
    # A-stability on the imaginary axis
    assert abs(stability_function(4j)) <= 1.0 + 1e-12


# ----------------------------------------------------------------------
# single steps

def test_single_step_local_order_six():
    h = 0.1
    res = radau_step(DECAY, 0.0, np.array([1.0]), h, RadauConfig())
    assert abs(res.y_next[0] - np.exp(-h)) < 2.0 * h ** 6
    assert abs(res.y_next[0] - stability_function(-h).real) < 1e-15


def test_zero_rhs_is_exact():
    ode = OdeSystem(f=lambda t, y: 0.0 * y, jac=lambda t, y: np.zeros((2, 2)))
    y0 = np.array([3.14, -2.7])
    res = radau_step(ode, 0.0, y0, 0.7, RadauConfig())
    assert np.array_equal(res.y_next, y0)
    assert res.error == 0.0


def test_observed_convergence_order():
    hs = [0.2, 0.1, 0.05, 0.025]
    errs = [abs(fixed_step_integrate(DECAY, h, 1.0, [1.0])[0] - np.exp(-1.0))
            for h in hs]
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 4.7 <= slope <= 5.3


# ----------------------------------------------------------------------
# controller

def test_controller_neutral():
    cfg = RadauConfig(safety=0.9)
    assert step_controller(1.0, 1.0, 1.0, cfg) == pytest.approx(0.9)


def test_controller_sixth_root_growth():
    cfg = RadauConfig(safety=0.9)
    # err = 1/64 with flat history: growth by exactly 2 (before safety)
    assert step_controller(1.0, 1.0 / 64, 1.0 / 64, cfg) == pytest.approx(1.8)


def test_controller_two_step_damping():
    cfg = RadauConfig(safety=0.9)
    flat = step_controller(1.0, 0.5, 0.5, cfg)
    rising = step_controller(1.0, 0.5, 0.1, cfg)  # errors increasing
    assert rising < flat


def test_controller_shrinks_on_rejection():
    assert step_controller(1.0, 4.0, rejected=True) < 1.0


def test_controller_clamps():
    cfg = RadauConfig(safety=0.9, dt_min=1e-3, dt_max=2.0)
    assert step_controller(1.0, 1e-30, 1e-30, cfg) <= 5.0
    assert step_controller(1.0, 1e30, rejected=True) >= 0.2 * 1e-3
    assert step_controller(1.9, 1e-30, 1e-30, cfg) == 2.0


# ----------------------------------------------------------------------
# interval integration

def test_interval_matches_exponential():
    cfg = RadauConfig(rtol=1e-8, atol=1e-10)
    out = integrate_interval(DECAY, 0.0, 1.0, np.array([1.0]), cfg)
    assert abs(out.y[0] - np.exp(-1.0)) < 1e-9
    assert out.stats.n_steps > 0
    assert out.stats.dt_smallest <= out.stats.dt_largest


def test_interval_zero_length():
    out = integrate_interval(DECAY, 0.5, 0.5, np.array([2.0]), RadauConfig())
    assert np.array_equal(out.y, [2.0])
    assert out.stats.n_steps == 0


def test_interval_lands_exactly():
    seen = []
    cfg = RadauConfig(rtol=1e-6, atol=1e-9)
    out = integrate_interval(DECAY, 0.0, 0.3456789, np.array([1.0]), cfg,
                             observer=lambda t, y: seen.append(t))
    assert seen[-1] == 0.3456789
    assert isinstance(out, IntegrationResult)


def test_stiff_prothero_robinson_no_order_collapse():
    lam = -1e6
    ode = OdeSystem(f=lambda t, y: lam * (y - np.sin(t)) + np.cos(t),
                    jac=lambda t, y: lam * np.eye(1))
    out = integrate_interval(ode, 0.0, 1.0, np.array([0.0]),
                             RadauConfig(rtol=1e-6, atol=1e-9))
    assert abs(out.y[0] - np.sin(1.0)) < 1e-7
    assert out.stats.n_steps < 40  # stiff accuracy: a handful of steps


def test_mass_matrix_system_dense_and_sparse():
    rng = np.random.default_rng(0)
    n = 6
    A = rng.normal(size=(n, n))
    M = A @ A.T + n * np.eye(n)
    B = rng.normal(size=(n, n))
    K = B @ B.T + n * np.eye(n)
    y0 = rng.normal(size=n)
    y_ref = sla.expm(-0.5 * np.linalg.solve(M, K)) @ y0
    cfg = RadauConfig(rtol=1e-10, atol=1e-12)

    dense = OdeSystem(f=lambda t, y: -(K @ y), jac=lambda t, y: -K, mass=M)
    out = integrate_interval(dense, 0.0, 0.5, y0, cfg)
    assert np.abs(out.y - y_ref).max() < 1e-8

    Ms, Ks = sp.csr_matrix(M), sp.csr_matrix(K)
    sparse = OdeSystem(f=lambda t, y: -(Ks @ y), jac=lambda t, y: (-Ks).tocsr(),
                       mass=Ms)
    out_sp = integrate_interval(sparse, 0.0, 0.5, y0, cfg)
    assert np.abs(out_sp.y - y_ref).max() < 1e-8


def test_time_dependent_mass():
    # (1 + t) y' = -y  ->  y = y0 / (1 + t)
    ode = OdeSystem(f=lambda t, y: -y, jac=lambda t, y: -np.eye(1),
                    mass=lambda t: np.array([[1.0 + t]]))
    out = integrate_interval(ode, 0.0, 1.0, np.array([1.0]),
                             RadauConfig(rtol=1e-10, atol=1e-12))
    assert abs(out.y[0] - 0.5) < 1e-9


def test_newton_divergence_halves_then_succeeds():
    # strongly nonlinear with an oversized first step: Newton must fail,
    # halve, and still deliver y(t) = y0 / sqrt(1 + 2 y0^2 t)
    ode = OdeSystem(f=lambda t, y: -y ** 3,
                    jac=lambda t, y: np.diag(-3 * y ** 2))
    y0 = 10.0
    out = integrate_interval(ode, 0.0, 1.0, np.array([y0]),
                             RadauConfig(rtol=1e-8, atol=1e-10), initial_dt=1.0)
    exact = y0 / np.sqrt(1 + 2 * y0 ** 2)
    assert abs(out.y[0] - exact) < 1e-7


def test_hard_failure_raises_with_state():
    blow = OdeSystem(f=lambda t, y: np.array([np.inf]),
                     jac=lambda t, y: np.eye(1))
    with pytest.raises(IntegratorFailureError) as err:
        integrate_interval(blow, 0.0, 1.0, np.array([1.0]),
                           RadauConfig(dt_min=1e-6))
    assert err.value.t is not None
    assert err.value.y is not None


def test_determinism_bit_identical():
    cfg = RadauConfig(rtol=1e-7, atol=1e-10)
    ys = []
    for _ in range(2):
        traj = []
        integrate_interval(DECAY, 0.0, 1.0, np.array([1.0]), cfg,
                           observer=lambda t, y: traj.append((t, y[0])))
        ys.append(traj)
    assert ys[0] == ys[1]


def test_accepted_steps_have_error_below_one():
    errors = []
    orig = radau_step

    cfg = RadauConfig(rtol=1e-5, atol=1e-8)
    ws = _Workspace(DECAY, cfg)
    t, y, h = 0.0, np.array([1.0]), 0.05
    while t < 1.0:
        h = min(h, 1.0 - t)
        res = orig(DECAY, t, y, h, cfg, ws)
        if res.converged and res.error <= 1.0:
            errors.append(res.error)
            t += h
            y = res.y_next
            ws.f0_key = None
            h = step_controller(h, res.error, config=cfg)
        else:
            h = step_controller(h, res.error, config=cfg, rejected=True)
    assert all(e <= 1.0 for e in errors)
