"""End-to-end segmentation runs.

Per macro step the pipeline (i) rebuilds the adaptation metric from the
current grey level, (ii) moves the computational mesh down the meshing
energy and recovers the new physical mesh through the correspondence map,
then (iii) integrates the coupled (U, Phi) flow across the interval with the
chord mesh velocity.  Epsilon selection and input scaling implement the
gradient-statistics formulas; both are opt-in and always recorded.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import fem, geometry, imagefield, meshmotion, metric, timeint
from .errors import FlatImageError, PhiBoundsError

SERIES_COLUMNS = (
    "t", "energy_diffusion", "energy_phase", "energy_fidelity", "energy_total",
    "phi_min", "phi_max", "min_element_volume",
    "steps", "rejected", "newton_failures", "dt_min", "dt_max", "dt_last",
)


# ----------------------------------------------------------------------
# closed-form selection and diagnostics

@dataclass(frozen=True)
class EpsilonSelection:
    value: float
    grad_mean: float


def select_epsilon(stats, alpha, beta):
    """Edge width from the gradient statistics of the input.

    beta / (2 alpha ((grad_max + grad_min)/2)^2); the mean gradient is
    reported alongside."""
    if stats.grad_max <= 0.0:
        raise FlatImageError("input has zero gradient everywhere; "
                             "no edges to select a regularization width for")
    mean = 0.5 * (stats.grad_max + stats.grad_min)
    return EpsilonSelection(beta / (2.0 * alpha * mean ** 2), mean)


def select_scale(grad_max, grad_cr):
    """Input amplification max(1, grad_cr / grad_max)."""
    if grad_max <= 0.0:
        raise FlatImageError("input has zero gradient everywhere; "
                             "scaling is undefined")
    return max(1.0, grad_cr / grad_max)


def equilibrium_phi(grad_u_sq, alpha, beta, eps):
    """Steady phase value where gradient decay balances recovery."""
    return beta / (beta + 2.0 * eps * alpha * grad_u_sq)


def asymptotic_phi(grad_u0_sq, alpha, beta, eps):
    """First-order small-eps expansion of the phase value."""
    return 1.0 - eps * (2.0 * alpha / beta) * grad_u0_sq


def macro_step_schedule(T, dt_macro):
    """Uniform macro grid hitting T exactly (mesh-update cadence)."""
    if T <= 0:
        raise ValueError("T must be positive")
    if dt_macro <= 0:
        raise ValueError("dt_macro must be positive")
    n = max(1, int(np.ceil(T / dt_macro - 1e-12)))
    return np.linspace(0.0, float(T), n + 1)


# ----------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    """Everything a segmentation run needs, serializable to a manifest."""
    source: dict                      # {"kind": "tanh1d", ...} or {"kind": "image", "path": ...}
    n: int = 50
    alpha: float = 1e-3
    beta: float = 1e-2
    gamma: float = 1e-5
    k_eps: float = 1e-10
    eps: float | str = "auto"
    scale: float | str = 1.0
    grad_cr: float = 3e3
    T: float = 1.0
    macro_dt: float = 0.05
    tau: float = 0.01
    theta: float = 1.0 / 3.0
    p: float = 1.5
    noise: float = 0.0
    seed: int = 42
    out_dir: str | None = None
    snapshot_every: int = 0
    snapshot_resolution: int = 256
    deterministic: bool = True
    freeze_mesh: bool = False
    record_step_energies: bool = False
    metric_floor: float = metric.DEFAULT_FLOOR
    rtol: float = 1e-5
    atol: float = 1e-8
    mesh_rtol: float = 1e-6
    mesh_atol: float = 1e-9


@dataclass
class RunResult:
    mesh: geometry.SimplicialMesh
    state: fem.NodalState
    params: fem.SegParams
    eps_value: float
    scale_value: float
    grad: imagefield.GradStats | None
    series: list = field(default_factory=list)
    csv_path: str | None = None
    out_dir: str | None = None
    phi_min_overall: float = np.inf
    phi_max_overall: float = -np.inf
    min_volume_overall: float = np.inf
    step_energies: list = field(default_factory=list)
    elapsed_seconds: float = 0.0
    schedule: np.ndarray | None = None


def build_field(config):
    """Construct (and optionally contaminate) the input grey-level field."""
    src = dict(config.source)
    kind = src.pop("kind")
    if kind == "image":
        g = imagefield.load_image(src["path"])
    else:
        g = imagefield.analytic_field(kind, **src)
    if config.noise > 0.0:
        g = imagefield.add_noise(g, config.noise, config.seed)
    return g


# ----------------------------------------------------------------------
# the ODE adapter for one macro interval

class _FlowOde(timeint.OdeSystem):
    """M(X(t)) d(U,Phi)/dt = (F, G) between two mesh snapshots."""

    def __init__(self, mesh_start, mesh_end, t0, t1, g_field, params):
        self.mesh = mesh_start
        self.t0 = t0
        self.dt = t1 - t0
        self.x0 = mesh_start.vertices
        self.x1 = mesh_end.vertices
        self.moving = not np.array_equal(self.x0, self.x1)
        self.g_field = g_field
        self.params = params
        self.n = mesh_start.n_vertices
        if self.moving:
            self.xdot = (self.x1 - self.x0) / self.dt
            self._interp = fem.MassInterpolator(mesh_start, self.x0, self.x1)
            self._fixed_mass = None
        else:
            self.xdot = None
            M = fem.mass_matrix(mesh_start)
            self._fixed_mass = sp.block_diag((M, M), format="csr")

    def _coords(self, t):
        if not self.moving:
            return self.x0
        s = (t - self.t0) / self.dt
        return (1.0 - s) * self.x0 + s * self.x1

    def _basis(self, t):
        return fem.ElementBasis(self.mesh, self._coords(t))

    def f(self, t, y):
        basis = self._basis(t)
        U, Phi = y[:self.n], y[self.n:]
        return np.concatenate([
            fem.rhs_u(self.mesh, self.xdot, U, Phi, self.g_field, self.params,
                      basis=basis),
            fem.rhs_phi(self.mesh, self.xdot, U, Phi, self.params, basis=basis),
        ])

    def jac(self, t, y):
        basis = self._basis(t)
        U, Phi = y[:self.n], y[self.n:]
        return fem.flow_jacobian(self.mesh, self.xdot, U, Phi, self.params,
                                 basis=basis)

    def mass(self, t):
        if not self.moving:
            return self._fixed_mass
        s = (t - self.t0) / self.dt
        M = self._interp(s)
        return sp.block_diag((M, M), format="csr")


# ----------------------------------------------------------------------
# output helpers

def _format_row(row):
    return ",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                    for c in SERIES_COLUMNS)


def _write_series(rows, path):
    with open(path, "w") as fh:
        fh.write(",".join(SERIES_COLUMNS) + "\n")
        for row in rows:
            fh.write(_format_row(row) + "\n")
    return str(path)


def _raster_points(mesh, resolution):
    (x0, x1), (y0, y1) = mesh.domain_box
    hx = (x1 - x0) / resolution
    hy = (y1 - y0) / resolution
    xs = x0 + (np.arange(resolution) + 0.5) * hx
    ys = y1 - (np.arange(resolution) + 0.5) * hy   # row 0 at the top
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def _emit_snapshot(out_dir, tag, mesh, state, params, resolution):
    out = Path(out_dir)
    u_over_L = state.U / params.L
    if mesh.dim == 2:
        pts = _raster_points(mesh, resolution)
        u_img = geometry.interpolate_vertex_values(mesh, u_over_L, pts)
        p_img = geometry.interpolate_vertex_values(mesh, state.Phi, pts)
        imagefield.save_pgm(u_img.reshape(resolution, resolution),
                            out / f"u_{tag}.pgm")
        imagefield.save_pgm(p_img.reshape(resolution, resolution),
                            out / f"phi_{tag}.pgm")
    else:
        imagefield.save_pgm(u_over_L[None, :], out / f"u_{tag}.pgm")
        imagefield.save_pgm(state.Phi[None, :], out / f"phi_{tag}.pgm")
        with open(out / f"profile_{tag}.csv", "w") as fh:
            fh.write("x,u,phi\n")
            for x, u, p in zip(mesh.vertices[:, 0], state.U, state.Phi):
                fh.write(f"{x!r},{u!r},{p!r}\n")
    geometry.save_vtk(mesh, out / f"mesh_{tag}.vtk",
                      point_data={"u": state.U, "phi": state.Phi})


def _persist_state(out_dir, mesh, state, t):
    np.savez(Path(out_dir) / "last_state.npz",
             t=t, vertices=mesh.vertices, elements=mesh.elements,
             U=state.U, Phi=state.Phi)


# ----------------------------------------------------------------------
# the run

def run_segmentation(config):
    """Execute the full pipeline described in the module docstring."""
    t_begin = time.perf_counter()
    g = build_field(config)

    stats = None
    if config.eps == "auto" or config.scale == "auto":
        stats = imagefield.grad_stats(g)
    L = select_scale(stats.grad_max, config.grad_cr) \
        if config.scale == "auto" else float(config.scale)
    eps = select_epsilon(stats, config.alpha, config.beta).value \
        if config.eps == "auto" else float(config.eps)

    params = fem.SegParams(alpha=config.alpha, beta=config.beta,
                           gamma=config.gamma, k_eps=config.k_eps, eps=eps,
                           L=L, grad_cr=config.grad_cr, T=config.T,
                           snapshot_every=config.snapshot_every)
    mm_params = meshmotion.MeshMotionParams(
        theta=config.theta, p=config.p, tau=config.tau,
        rtol=config.mesh_rtol, atol=config.mesh_atol)
    radau_cfg = timeint.RadauConfig(rtol=config.rtol, atol=config.atol)

    mesh = geometry.build_uniform_mesh(g.dim, config.n)
    ref_comp = mesh
    U = L * np.asarray(g.eval(mesh.vertices), dtype=float)
    Phi = np.ones(mesh.n_vertices)
    state = fem.NodalState(U, Phi)

    schedule = macro_step_schedule(config.T, config.macro_dt)
    result = RunResult(mesh=mesh, state=state, params=params, eps_value=eps,
                       scale_value=L, grad=stats, out_dir=config.out_dir,
                       schedule=schedule)
    out_dir = None
    if config.out_dir is not None:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    def record(t, mesh_now, st, stats_dict):
        energy = fem.at_energy(mesh_now, st.U, st.Phi, g, params)
        vols = mesh_now.element_volumes()
        row = {
            "t": float(t),
            "energy_diffusion": energy.diffusion,
            "energy_phase": energy.phase,
            "energy_fidelity": energy.fidelity,
            "energy_total": energy.total,
            "phi_min": float(st.Phi.min()),
            "phi_max": float(st.Phi.max()),
            "min_element_volume": float(vols.min()),
            **stats_dict,
        }
        result.series.append(row)
        result.phi_min_overall = min(result.phi_min_overall, row["phi_min"])
        result.phi_max_overall = max(result.phi_max_overall, row["phi_max"])
        result.min_volume_overall = min(result.min_volume_overall,
                                        row["min_element_volume"])

    zero_stats = {"steps": 0, "rejected": 0, "newton_failures": 0,
                  "dt_min": 0.0, "dt_max": 0.0, "dt_last": 0.0}
    record(0.0, mesh, state, zero_stats)
    if out_dir is not None:
        _emit_snapshot(out_dir, "t0", mesh, state, params,
                       config.snapshot_resolution)

    warm_dt = None
    try:
        for step_idx, (t_n, t_np1) in enumerate(zip(schedule, schedule[1:])):
            dt_macro = t_np1 - t_n

            mesh_next = mesh
            if not config.freeze_mesh:
                mfield = metric.metric_for_state(mesh, state.U,
                                                 floor=config.metric_floor)
                motion_dt = dt_macro
                for _ in range(3):  # tangling fallback: halve the pseudo-time
                    comp = meshmotion.step_computational_mesh(
                        mesh, mfield, ref_comp, mm_params, motion_dt)
                    try:
                        mesh_next = geometry.apply_correspondence(
                            mesh, comp, ref_comp)
                        break
                    except Exception as exc:  # MeshTanglingError expected
                        warnings.warn(
                            f"macro step {step_idx}: correspondence failed "
                            f"({exc}); halving mesh pseudo-time", stacklevel=2)
                        motion_dt *= 0.5
                        mesh_next = mesh

            ode = _FlowOde(mesh, mesh_next, t_n, t_np1, g, params)
            y0 = np.concatenate([state.U, state.Phi])
            observer = None
            if config.record_step_energies and not ode.moving:
                nv = mesh.n_vertices
                basis = fem.ElementBasis(mesh)

                def observer(t, y, _basis=basis, _nv=nv):
                    e = fem.at_energy(mesh, y[:_nv], y[_nv:], g, params,
                                      basis=_basis)
                    result.step_energies.append((float(t), e.total))

            out = timeint.integrate_interval(ode, t_n, t_np1, y0, radau_cfg,
                                             observer=observer,
                                             initial_dt=warm_dt)
            warm_dt = out.stats.last_dt or None
            nv = mesh.n_vertices
            state = fem.NodalState(out.y[:nv].copy(), out.y[nv:].copy())
            mesh = mesh_next
            result.mesh, result.state = mesh, state

            if not state.phi_in_bounds():
                raise PhiBoundsError(
                    f"phase field left [-0.05, 1.05] at t = {t_np1:.6g}: "
                    f"min {state.Phi.min():.4f}, max {state.Phi.max():.4f}")

            record(t_np1, mesh, state, {
                "steps": out.stats.n_steps,
                "rejected": out.stats.n_rejected,
                "newton_failures": out.stats.n_newton_failures,
                "dt_min": out.stats.dt_smallest,
                "dt_max": out.stats.dt_largest,
                "dt_last": out.stats.last_dt,
            })
            if out_dir is not None and config.snapshot_every > 0 \
                    and (step_idx + 1) % config.snapshot_every == 0:
                _emit_snapshot(out_dir, f"macro{step_idx + 1:05d}", mesh,
                               state, params, config.snapshot_resolution)
    except Exception:
        if out_dir is not None:
            _write_series(result.series, out_dir / "series.csv")
            _persist_state(out_dir, result.mesh, result.state,
                           result.series[-1]["t"])
        raise

    if out_dir is not None:
        _emit_snapshot(out_dir, "final", mesh, state, params,
                       config.snapshot_resolution)
        result.csv_path = _write_series(result.series, out_dir / "series.csv")
        _persist_state(out_dir, mesh, state, schedule[-1])
    result.elapsed_seconds = time.perf_counter() - t_begin
    return result
