"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` next to the human
message so callers (and the CLI) can branch on failure kind without
string matching.
"""


class CytenError(Exception):
    """Base class for all package errors."""

    def __init__(self, code, message=None):
        self.code = code
        super().__init__(message if message is not None else code)


class ValidationError(CytenError):
    """Bad inputs, shapes, configs or preconditions. CLI exit code 1."""


class FormatError(ValidationError):
    """Malformed on-disk artifact (volume, checkpoint, manifest)."""


class TrainingDiverged(CytenError):
    """Loss became non-finite; the last good checkpoint was kept."""

    def __init__(self, message, checkpoint=None):
        super().__init__("training diverged", message)
        self.checkpoint = checkpoint
