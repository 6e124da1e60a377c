"""Exception hierarchy shared by every module.

Each error carries the name of the module that raised it and a short
machine-readable kind, so the CLI and the service can emit a single
parsable line (``ERROR:<module>:<kind>: message``) on any failure path.
"""

from __future__ import annotations


class VfmError(Exception):
    """Base class for all structured errors raised by this package."""

    kind = "error"

    def __init__(self, module: str, message: str):
        self.module = module
        super().__init__(message)

    def cli_line(self) -> str:
        return f"ERROR:{self.module}:{self.kind}: {self}"


class DimensionMismatch(VfmError):
    kind = "dimension"


class ContractViolation(VfmError):
    kind = "contract"


class LookupFailure(VfmError):
    kind = "lookup"


class FormatError(VfmError):
    kind = "format"


class TruncationError(FormatError):
    kind = "truncation"


class VersionError(FormatError):
    kind = "version"


class UnsupportedDtype(FormatError):
    kind = "dtype"


class SchemaError(VfmError):
    kind = "schema"


class ValidationFailure(VfmError):
    kind = "validation"


class ConfigurationError(VfmError):
    kind = "config"
