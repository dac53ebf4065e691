"""Exception taxonomy shared across the package."""


class PhantomsimError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(PhantomsimError):
    """Invalid shapes, sizes or option values. Fatal, caller must fix setup."""


class ProtocolError(PhantomsimError):
    """Collective misuse: mismatched calls, root disagreement, deadlock."""


class SequencingError(PhantomsimError):
    """Operation invoked out of order, e.g. backward without a forward tape."""


class TrainingError(PhantomsimError):
    """Divergence or non-finite values encountered while training."""


class FitError(PhantomsimError):
    """Communication cost-model regression could not be solved."""


class OracleError(PhantomsimError):
    """A verification oracle produced an unusable value."""
