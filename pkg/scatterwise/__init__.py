"""
scatterwise - Electromagnetic scattering by many small particles

Polarizability tensors of small bodies from boundary integrals, far-zone
scattering operators, the coupled local-field system for N particles, the
continuum limit for particle clouds and near fields from surface currents.
"""

__version__ = "0.1.0"
__author__ = "scatterwise Contributors"

from .core.geometry import QuadratureSpec, SurfaceMesh, make_canonical_mesh
from .core.polarizability import MaterialContrast, PolarizabilityTensor, polarizability
from .core.scattering import ScatterFrame, WaveContext, s_matrix_E, s_operator
from .core.multiparticle import IncidentField, ParticleInstance, solve_direct, solve_fixed_point
from .core.medium import DensityField, q_from_density, solve_effective_field
from .core.nearfield import assemble_A, solve_current
from .core.runner import RunConfig, SceneRunner, load_run_config

__all__ = [
    "QuadratureSpec",
    "SurfaceMesh",
    "make_canonical_mesh",
    "MaterialContrast",
    "PolarizabilityTensor",
    "polarizability",
    "ScatterFrame",
    "WaveContext",
    "s_matrix_E",
    "s_operator",
    "IncidentField",
    "ParticleInstance",
    "solve_direct",
    "solve_fixed_point",
    "DensityField",
    "q_from_density",
    "solve_effective_field",
    "assemble_A",
    "solve_current",
    "RunConfig",
    "SceneRunner",
    "load_run_config",
    "__version__",
]
