"""Exception hierarchy. Every error carries a machine-readable category
string so the CLI can map failures to stable exit codes."""


class VoxsegError(Exception):
    category = "error"
    exit_code = 1


class ShapeError(VoxsegError):
    category = "shape"
    exit_code = 2


class NonFiniteError(VoxsegError):
    category = "non-finite"
    exit_code = 3


class ConfigError(VoxsegError):
    category = "config"
    exit_code = 4


class FormatError(VoxsegError):
    """Malformed or unsupported file content (NIfTI, native manifests,
    checkpoints)."""

    category = "format"
    exit_code = 5


class DataError(VoxsegError):
    """Dataset-level problems: missing cases, mismatched ids, bad labels."""

    category = "data"
    exit_code = 6


class TrainingDiverged(VoxsegError):
    category = "diverged"
    exit_code = 7
