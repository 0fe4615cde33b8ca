"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI lives in cli.py; library code raises
these and never calls sys.exit itself.
"""


class LapregError(Exception):
    """Base class for all toolkit errors."""


class ParseError(LapregError):
    """Malformed mesh / tensor / sample file. Carries file position context."""

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte {offset}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)


class ConfigError(LapregError):
    """Invalid or inconsistent configuration (bad keys, missing files)."""


class DataError(LapregError):
    """Structurally invalid runtime data (bad sample, empty crop, ...)."""


class CropError(DataError):
    """Visibility crop produced an empty candidate set."""


class SolverError(LapregError):
    """Numerical solver failure (singular system, CG breakdown)."""
