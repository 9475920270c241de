"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class NumericDegenerateError(ArithmeticError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss component turns NaN/inf; carries the component name."""

    def __init__(self, component, value):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value


class FormatError(ValueError):
    """Binary container is malformed. ``offset`` is the byte where reading failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(ValueError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason
