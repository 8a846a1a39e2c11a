"""Exception hierarchy shared across the toolkit.

The CLI maps :class:`InputError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""

from __future__ import annotations


class GhostSpecError(Exception):
    """Base class for every error raised by this package."""


class InputError(GhostSpecError, ValueError):
    """Malformed or inconsistent user-supplied input."""


class CheckpointError(InputError):
    """A checkpoint file, shard index, or tensor could not be decoded."""


class LayoutError(InputError):
    """Projection tensors do not form a usable layer layout."""


class FingerprintFormatError(InputError):
    """A fingerprint file is malformed or has an unsupported version."""


class NumericalError(GhostSpecError, ArithmeticError):
    """A numerical routine failed (e.g. SVD did not converge)."""


class SVDConvergenceError(NumericalError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max relative off-diagonal residual {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual
