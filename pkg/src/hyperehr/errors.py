"""Exception taxonomy. The CLI maps these onto structured exit codes."""


class HyperEHRError(Exception):
    """Base class for package errors."""


class ConfigError(HyperEHRError):
    """Invalid or inconsistent configuration."""


class DataError(HyperEHRError):
    """Malformed or out-of-contract input data."""


class CorpusExhaustedError(DataError):
    """Preprocessing removed every patient."""


class HierarchyError(DataError):
    """Cyclic or otherwise invalid code hierarchy."""


class ProvenanceError(DataError):
    """Checkpoint lineage does not match the supplied inputs."""


class NumericError(HyperEHRError):
    """NaN/Inf or divergence during numeric computation."""
