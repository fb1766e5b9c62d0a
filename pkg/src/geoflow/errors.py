"""Exception types shared across the package."""


class GeoflowError(Exception):
    pass


class DimensionMismatchError(GeoflowError, ValueError):
    """Parameter vector length does not match the model."""

    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"parameter dimension mismatch: model expects m={expected}, got m={actual}")


class SingularKernelError(GeoflowError, RuntimeError):
    """NTK Gram matrix is rank-deficient; carries the offending lambda_min."""

    def __init__(self, lambda_min, context=""):
        self.lambda_min = lambda_min
        msg = f"NTK Gram matrix numerically singular (lambda_min={lambda_min:.3e})"
        if context:
            msg += f" [{context}]"
        super().__init__(msg)


class DivergenceError(GeoflowError, RuntimeError):
    """Flow integration produced a non-finite state; carries the last good step."""

    def __init__(self, message, last_step=None):
        self.last_step = last_step
        super().__init__(message)


class StepSizeError(GeoflowError, RuntimeError):
    """Stability guard could not find a usable step size."""


class FibreError(GeoflowError, RuntimeError):
    """Fibre tracing failed (different fibres, or conditioning lost)."""


class UnsupportedScaleError(GeoflowError, RuntimeError):
    """Operation only supported at toy scale."""


class RepresentativeProbeError(GeoflowError, RuntimeError):
    """A representative-map probe run failed to converge."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class EnergySolveError(GeoflowError, RuntimeError):
    """Horizontal energy solve failed structurally (e.g. rank collapse)."""


class ConfigError(GeoflowError, ValueError):
    """Scenario configuration is invalid."""
