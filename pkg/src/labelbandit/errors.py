"""Exception types shared across the package."""


class LabelBanditError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(LabelBanditError, ValueError):
    """Data violates a structural invariant (bad file, bad dataset, bad shapes)."""


class ParseError(ValidationError):
    """A dataset file could not be parsed; the message names the line or record."""


class ParameterError(LabelBanditError, ValueError):
    """A caller-supplied parameter is out of range or infeasible."""


class ConfigError(LabelBanditError, ValueError):
    """A run configuration is malformed or internally inconsistent."""


class RegimeError(LabelBanditError, ValueError):
    """An operation was applied to a dataset whose weak-label regime it does not support."""


class RewardRangeError(LabelBanditError, ValueError):
    """A reward fell outside [0, 1]; this signals a buggy reward function."""


class EvaluationError(LabelBanditError, ValueError):
    """Metrics were requested on data that lacks the required ground truth."""


class InferenceError(LabelBanditError, RuntimeError):
    """An inference run aborted; the message carries round and assignment context."""
