"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class CanditoError(Exception):
    code = "error"


class TraceParseError(CanditoError):
    code = "parse_error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceOrderError(TraceParseError):
    code = "ordering_error"


class InsufficientDataError(CanditoError):
    code = "insufficient_data"


class StructuralError(CanditoError):
    code = "structural_error"


class SignalBoundsError(CanditoError):
    code = "bounds_error"


class SignalRangeError(CanditoError):
    code = "range_error"


class NoTargetError(CanditoError):
    code = "no_target"


class SpanError(CanditoError):
    code = "span_error"


class AttackSpecError(CanditoError):
    code = "attack_spec_error"


class IneligibleError(CanditoError):
    code = "ineligible"


class NumericFailure(CanditoError):
    code = "numeric_failure"


class TrainingFailure(CanditoError):
    code = "training_failure"


class ConfigError(CanditoError):
    code = "config_error"


class ModelFormatError(CanditoError):
    code = "model_format_error"


class DigestMismatch(ModelFormatError):
    code = "digest_mismatch"


class ShapeMismatch(CanditoError):
    code = "shape_mismatch"


class AlignmentError(CanditoError):
    code = "alignment_error"
