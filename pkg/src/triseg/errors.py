"""Exception types shared across the pipeline.

The CLI maps ConfigurationError to exit code 2 and DivergenceError to 3;
everything else is an ordinary failure.
"""


class TriSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TriSegError):
    """Invalid configuration: bad ranges, inconsistent flags, dim mismatches."""


class ProtocolError(TriSegError):
    """Fold/split protocol violated (e.g. class count not divisible by 4)."""


class SamplingError(TriSegError):
    """Episode sampling impossible (too few samples of the requested class)."""


class DatasetSpecError(TriSegError):
    """Synthetic dataset spec cannot be satisfied (e.g. image too small)."""


class MissingFixtureError(TriSegError):
    """Requested category has no registered mock entry or fixture file."""


class FixtureIntegrityError(TriSegError):
    """Fixture blob failed checksum or dimension validation."""


class InputError(TriSegError):
    """Adapter input outside its documented domain."""


class EmptyRegionError(TriSegError):
    """A mask is empty at the resolution where pooling was requested."""


class PriorError(TriSegError):
    """A location prior could not be computed (e.g. zero prototype)."""


class DivergenceError(TriSegError):
    """Training loss became non-finite."""


class CheckpointError(TriSegError):
    """Checkpoint incompatible with the requested configuration."""
