"""Exception types shared across the package."""


class SamNoiseError(Exception):
    pass


class DataFormatError(SamNoiseError, ValueError):
    """A dataset file does not match its declared binary layout."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {message}")


class DegenerateGradient(SamNoiseError, ArithmeticError):
    """Perturbation direction has (numerically) zero norm."""


class EmptyStratum(SamNoiseError, ValueError):
    """A clean/noisy stratum needed by a metric has no examples."""


class UndefinedAccuracy(SamNoiseError, ValueError):
    pass


class UnsupportedModel(SamNoiseError, TypeError):
    pass


class NonFiniteLoss(SamNoiseError, FloatingPointError):
    def __init__(self, epoch, value):
        self.epoch = epoch
        super().__init__(f"non-finite training loss {value!r} at epoch {epoch}")
