"""Exception types shared across the package."""


class OptitomoError(Exception):
    """Base class for package-specific failures."""


class UsageError(OptitomoError):
    """Bad command-line arguments or configuration keys."""


class MeshError(OptitomoError):
    """Mesh generation, refinement, or validation failure."""


class FieldError(OptitomoError):
    """Invalid field data: wrong length, sign violation, or mesh mismatch."""


class SolverError(OptitomoError):
    """Linear solve failure or a violated discrete-operator invariant."""


class CertificateError(OptitomoError):
    """Localized-current search exhausted its budget without a certificate."""
