"""Exception hierarchy."""


class DefensePrefixError(Exception):
    """Base class for all package errors."""


class ModelLoadError(DefensePrefixError):
    pass


class CapabilityError(DefensePrefixError):
    pass


class InputShapeError(DefensePrefixError, ValueError):
    pass


class SequenceLengthError(DefensePrefixError, ValueError):
    pass


class TemplateError(DefensePrefixError, ValueError):
    pass


class RenderError(DefensePrefixError):
    pass


class ManifestError(DefensePrefixError):
    """Malformed or inconsistent manifest; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PairingError(DefensePrefixError):
    def __init__(self, message: str, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class CompatibilityError(DefensePrefixError):
    pass


class ConfigError(DefensePrefixError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DivergenceError(DefensePrefixError):
    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DPFormatError(DefensePrefixError):
    pass


class MissingImageError(DefensePrefixError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"image file not found: {path}")
        self.path = str(path)


class NumericError(DefensePrefixError, ArithmeticError):
    pass
