class TosudaError(ValueError):
    """Base class for errors raised by tosuda."""


class DimensionError(TosudaError):
    pass


class ContractError(TosudaError):
    pass


class NumericDomainError(TosudaError):
    pass


class FormatError(TosudaError):
    pass


class CheckpointError(FormatError):
    pass


class ConfigError(TosudaError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f", line {line}"
            location += ": "
        super().__init__(f"{location}{message}")
