"""Grey-scale image segmentation by the Ambrosio-Tortorelli gradient flow
on adaptive moving simplicial meshes."""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .driver import (  # noqa: F401
    RunConfig,
    RunResult,
    asymptotic_phi,
    equilibrium_phi,
    macro_step_schedule,
    run_segmentation,
    select_epsilon,
    select_scale,
)
from .fem import NodalState, SegParams, at_energy, mass_matrix  # noqa: F401
from .geometry import (  # noqa: F401
    SimplicialMesh,
    apply_correspondence,
    build_uniform_mesh,
    edge_matrices,
    locate_point,
    locate_points,
)
from .imagefield import (  # noqa: F401
    GradStats,
    add_noise,
    analytic_field,
    grad_stats,
    load_image,
)
from .meshmotion import (  # noqa: F401
    MeshMotionParams,
    g_function_and_derivs,
    local_velocities,
    meshing_energy,
    step_computational_mesh,
)
from .metric import (  # noqa: F401
    MetricField,
    metric_for_state,
    metric_from_hessian,
    recover_hessian,
    transfer_metric,
)
from .timeint import (  # noqa: F401
    OdeSystem,
    RadauConfig,
    integrate_interval,
    radau_step,
    step_controller,
)
