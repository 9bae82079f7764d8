"""Mixed finite elements on anisotropic level-set trace meshes.

Extracts a conforming triangulation of a level-set surface from a background
tetrahedral mesh, solves the mixed formulation of the surface diffusion
problem on it with lowest-order H(div) elements via hybridization, and
postprocesses the scalar unknown to second order.
"""

from .geometry import (
    Sphere,
    SurfaceField,
    TangentFrame,
    area_ratio,
    consistency_matrix,
    frame_at,
    lift_scalar,
    piola_from_surface,
    piola_to_surface,
)
from .trace_mesh import (
    BulkMesh,
    TraceMesh,
    bisect_quads,
    build_bulk_mesh,
    extract_trace_surface,
    mesh_stats,
    read_vertex_values,
    write_off,
)
from .elements import (
    AffineMap,
    MixedSpace,
    interpolate_hdiv,
    interpolate_lagrange,
    mixed_space,
    project_l2,
    push_forward_vector,
    triangle_rule,
)
from .assembly import (
    HybridSystem,
    SolutionFields,
    build_rhs,
    condense_and_assemble,
    effective_condition_number,
    solve_hybrid,
    solve_saddle_point,
)
from .postprocess_errors import (
    ErrorReport,
    ManufacturedProblem,
    compute_errors,
    eoc,
    manufactured_sphere,
    postprocess_gradient,
    postprocess_neumann,
)
from .cli import StudyConfig, run_study

__version__ = "0.1.0"
