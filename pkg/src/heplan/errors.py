"""Exception hierarchy and CLI exit codes."""


class HeplanError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(HeplanError):
    """Invalid or mismatched arguments to a crypto/ring operation."""


class ConstructionError(HeplanError):
    """An object cannot be built from the given inputs (bad modulus, shapes...)."""


class ConfigError(HeplanError):
    """Run configuration is unreadable or inconsistent.  CLI exit code 2."""

    exit_code = 2


class InfeasibleError(HeplanError):
    """No parameter set / policy satisfies the constraints.  CLI exit code 3."""

    exit_code = 3

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class MissingPrerequisiteError(HeplanError):
    """A required artifact (table, model, ...) does not exist yet.  CLI exit code 4."""

    exit_code = 4


class UnsupportedDegreeError(ParameterError):
    """Ring degree not covered by the bundled security table."""


class BatchingUnsupportedError(ParameterError):
    """Plaintext modulus does not admit slot batching (p != 1 mod 2n)."""


class CalibrationError(HeplanError):
    """Latency calibration failed a sanity check (e.g. monotonicity)."""


class GapError(HeplanError):
    """Latency table has no entry for the requested grid point."""
