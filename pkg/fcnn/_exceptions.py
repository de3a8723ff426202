"""
Our classy exception set.
"""


class FcnnError(Exception):
    "Base for every error raised on purpose by ``fcnn``"


class SpecError(FcnnError, ValueError):
    """A layer annotation could not be parsed or violates the
    supported geometry.
    """


class ShapeError(FcnnError, ValueError):
    "Tensor shapes disagree or a size is not divisible as required"


class ConfigError(FcnnError, ValueError):
    "Invalid training, scene or run configuration"


class CheckpointError(FcnnError):
    "Checkpoint file is corrupt, truncated or from another format version"


class DataError(FcnnError):
    "Missing or malformed dataset content"


class EvaluationError(FcnnError, ValueError):
    "Scores and labels can not produce a ROC curve"


class NumericalError(FcnnError, FloatingPointError):
    "A tensor holds or an op produced NaN or infinite values"


def format_error(exc: BaseException) -> str:
    """Render an error as the one line diagnostic printed by the CLI.
    """
    msg = str(exc).strip().splitlines()
    return f"{type(exc).__name__}: {msg[0] if msg else 'no details'}"
