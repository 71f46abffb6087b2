"""Exception types shared across the package."""


class PatchprefError(Exception):
    """Base class for all library errors."""


class ShapeError(PatchprefError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(PatchprefError):
    """A configuration value is outside its valid domain."""


class ContractError(PatchprefError):
    """A caller violated an operation precondition."""


class NonFiniteError(PatchprefError):
    """A tensor would contain NaN or infinity."""


class FormatError(PatchprefError):
    """Malformed tensor file; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DescriptorError(PatchprefError):
    """A scene descriptor cannot be rendered."""


class DivergenceError(PatchprefError):
    """Training produced a non-finite loss; carries the step index and trace."""

    def __init__(self, message: str, step: int, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = list(trace) if trace is not None else []
