"""mflab: singular mean field equations on planar domains.

Finite element solvers, spectral diagnostics and isoperimetric certificates
for the constrained Liouville problem

    Δu + ρ h e^u / ∫_Ω h e^u = 0 in Ω,    u = 0 on ∂Ω,

with a weight h carrying conical singularities |x - p_j|^{2 α_j}.
"""

__version__ = "0.1.0"

from .geometry import (
    GeometryError,
    PlanarDomain,
    RefinementError,
    SubdomainSlice,
    TriangleMesh,
    boundary_integral,
    build_mesh,
    extract_level_set,
    fill_holes,
    refine_uniform,
)
from .weights import (
    Atom,
    AtomicMeasure,
    HypothesisError,
    SingularWeight,
    alpha_of,
    build_weight,
    green_disk,
    green_fem,
)

__all__ = [
    "__version__",
    "Atom",
    "AtomicMeasure",
    "GeometryError",
    "HypothesisError",
    "PlanarDomain",
    "RefinementError",
    "SingularWeight",
    "SubdomainSlice",
    "TriangleMesh",
    "alpha_of",
    "boundary_integral",
    "build_mesh",
    "build_weight",
    "extract_level_set",
    "fill_holes",
    "green_disk",
    "green_fem",
    "refine_uniform",
]
