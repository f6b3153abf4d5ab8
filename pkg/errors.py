from typing import Optional


class SharpError(Exception):
    pass


class ConfigurationError(SharpError):
    """Invalid model, pruning or experiment configuration. `field` names the offending key."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(SharpError):
    pass


class DegenerateVectorError(SharpError):
    pass


class LayoutMismatchError(SharpError):
    pass


class SequenceFormatError(SharpError):
    pass


class UnreachableBudgetError(SharpError):
    pass


class PlotSchemaError(SharpError):
    def __init__(self, missing, expected):
        self.missing = list(missing)
        self.expected = list(expected)
        super().__init__(f"Missing columns {self.missing}; expected schema: {', '.join(self.expected)}")
