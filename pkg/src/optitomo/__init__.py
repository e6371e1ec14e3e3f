"""Desk-scale toolkit for the steady-state optical-tomography inverse problem."""

from .errors import (
    CertificateError,
    FieldError,
    MeshError,
    OptitomoError,
    SolverError,
    UsageError,
)
from .mesh import Partition, TriMesh, generate_disk_mesh, refine_uniform, subdomain_partition
from .field import (
    BoundaryTrace,
    NodalField,
    PiecewiseConstantField,
    restrict_to_boundary,
    sample_coefficient,
    transfer_boundary_trace,
)

__version__ = "0.1.0"

__all__ = [
    "BoundaryTrace",
    "CertificateError",
    "FieldError",
    "MeshError",
    "NodalField",
    "OptitomoError",
    "Partition",
    "PiecewiseConstantField",
    "SolverError",
    "TriMesh",
    "UsageError",
    "__version__",
    "generate_disk_mesh",
    "refine_uniform",
    "restrict_to_boundary",
    "sample_coefficient",
    "subdomain_partition",
    "transfer_boundary_trace",
]
