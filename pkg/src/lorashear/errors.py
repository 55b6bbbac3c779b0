"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
StageError -> 3, NumericError -> 4, anything else -> 1.
"""


class LoraShearError(Exception):
    """Base class for all package errors."""


class ConfigError(LoraShearError):
    """Invalid configuration value; message carries the config path."""


class StageError(LoraShearError):
    """Pipeline stage precondition failed (missing or stale artifact)."""


class NumericError(LoraShearError):
    """Non-finite values or divergence during numeric work."""


class ShapeError(LoraShearError):
    """Tensor dimension mismatch."""


class InputError(LoraShearError):
    """Invalid runtime input (out-of-range token ids, overlong sequences)."""


class TapeStateError(LoraShearError):
    """Autodiff tape used out of protocol (double backward, empty tape)."""


class FormatError(LoraShearError):
    """Checkpoint file malformed: bad magic, version, or truncation."""


class AnalysisError(LoraShearError):
    """Graph or group analysis found an inconsistent structure."""


class CorruptionError(LoraShearError):
    """Model state failed to restore bit-identically after a probe."""


class PlanError(LoraShearError):
    """Compression plan propagation is inconsistent."""
