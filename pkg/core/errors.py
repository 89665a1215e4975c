"""
Exception hierarchy for the RKESim project.
"""
from typing import List, Optional


class RkeSimError(Exception):
    """Base class for every error raised by the simulator."""


class IndexOutOfRange(RkeSimError):
    """A challenge referenced a slot outside the key table."""


class WireError(RkeSimError):
    """Base class for frame decode/encode failures."""


class BadSync(WireError):
    pass


class BadCrc(WireError):
    pass


class UnknownType(WireError):
    pass


class SchemaViolation(WireError):
    pass


class DeviceBusy(RkeSimError):
    """A button was pressed while the fob already had a transaction in flight."""


class ProvisioningError(RkeSimError):
    pass


class WrongPassword(ProvisioningError):
    pass


class PortEmpty(ProvisioningError):
    pass


class IdMismatch(ProvisioningError):
    pass


class ExchangeFailed(ProvisioningError):
    """The key exchange was stopped; `report` says what state the devices are in."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"Key exchange failed: {report.outcome} (fob {report.failed_fob})")


class RollingCodeDesync(RkeSimError):
    """The received counter lies beyond the acceptance window."""


class PredictorFailed(RkeSimError):
    """Observed outputs are inconsistent with the weak generator model."""


class ConfigError(RkeSimError):
    """
    Invalid configuration file.

    Args:
        errors: One 'section.field: reason' entry per invalid field
    """

    def __init__(self, errors: List[str], path: Optional[str] = None):
        self.errors = list(errors)
        self.path = path
        where = f" in {path}" if path else ""
        super().__init__(f"Invalid configuration{where}: " + "; ".join(self.errors))


class TraceFormatError(RkeSimError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class InvariantViolation(RkeSimError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(f"{len(self.violations)} invariant violation(s)")
