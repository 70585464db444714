"""Exception types shared across the package."""


class FlowCsiError(Exception):
    """Base class for all library errors."""


class InvalidConfigError(FlowCsiError):
    """A configuration object violates one of its invariants."""


class DimensionMismatchError(FlowCsiError):
    """Inputs do not agree on antenna count, latent size, or bit length."""


class MalformedBitsError(FlowCsiError):
    """A feedback bit-string has the wrong length or non-binary entries."""


class SingularChannelError(FlowCsiError):
    """Channel matrix is rank deficient or too ill-conditioned to invert."""


class DegenerateMeanError(FlowCsiError):
    """The posterior mean vanished, so no mean direction exists."""


class TrainingDivergedError(FlowCsiError):
    """Training loss became non-finite or exceeded the divergence cap."""


class MissingDependencyError(FlowCsiError):
    """A stage requires an artifact (e.g. a front-end checkpoint) that is absent."""
