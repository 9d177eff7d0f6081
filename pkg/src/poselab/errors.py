"""Exception types shared across the toolkit."""


class PoselabError(Exception):
    """Base class for all toolkit errors."""


class DegenerateQuaternionError(PoselabError, ValueError):
    """Raised when a quaternion with (near-)zero norm is normalized."""


class ShapeError(PoselabError, ValueError):
    """Raised when an array argument has the wrong shape or size."""


class DivergedError(PoselabError, ArithmeticError):
    """Raised when a training loop or recurrence produces non-finite values."""


class LocalizationFailure(PoselabError, RuntimeError):
    """Raised when a query pose cannot be recovered (too few points, no consensus)."""


class InsufficientMatchesError(PoselabError, RuntimeError):
    """Raised when match filtering leaves too little data to reconstruct."""


class StageError(PoselabError, RuntimeError):
    """Pipeline stage failure; carries the name of the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
