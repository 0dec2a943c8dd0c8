"""Exception types shared across the toolkit, mapped to CLI exit codes."""


class DpflError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(DpflError):
    """Bad configuration file, unknown key, or invalid option combination."""

    exit_code = 2


class DataError(DpflError):
    """Malformed input data or a violated data-pipeline precondition."""

    exit_code = 3


class ProtocolError(DpflError):
    """Wire-protocol violation: bad frame, unexpected message, wrong round."""

    exit_code = 4


class CalibrationError(DpflError):
    """Noise calibration cannot reach the requested privacy target."""

    exit_code = 5
