"""Exception types raised across the package."""


class HstError(Exception):
    """Base class for all package errors."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class DimensionError(HstError, ValueError):
    kind = "dimension_error"


class DomainError(HstError, ArithmeticError):
    kind = "domain_error"


class ContractError(HstError, ValueError):
    kind = "contract_error"


class ConfigurationError(HstError, ValueError):
    kind = "configuration_error"


class SchemaError(HstError, ValueError):
    kind = "schema_error"


class ParseError(HstError, ValueError):
    """Malformed input file. ``location`` names the offending line or field."""

    kind = "parse_error"

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location

    def to_dict(self):
        d = super().to_dict()
        d["location"] = self.location
        return d


class DivergenceError(HstError, FloatingPointError):
    kind = "divergence"

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}

    def to_dict(self):
        d = super().to_dict()
        d["record"] = self.record
        return d
