"""
Exception hierarchy for the runner. Each error carries the process exit code
the CLI reports for it.
"""


class KandyError(Exception):
    exit_code = 1


class ConfigError(KandyError):
    """Schema violation; message names the offending field path."""
    exit_code = 2


class DivergenceError(KandyError):
    exit_code = 3

    def __init__(self, message: str, epoch: int = -1, last_finite_loss: float = float("nan")):
        super().__init__(message)
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


class ArtifactIOError(KandyError):
    exit_code = 4


class MissingArtifactError(KandyError):
    """An upstream stage artifact is absent (or unusable, e.g. an untrained model)."""
    exit_code = 5

    def __init__(self, path: str, reason: str = "missing"):
        super().__init__(f"Expected artifact {path} ({reason})")
        self.path = path
