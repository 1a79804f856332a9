"""Exception types shared across the package.

Each class maps to a distinct CLI exit code (see cli.py).
"""


class WinphoError(Exception):
    """Base class for all package errors."""


class ShapeError(WinphoError):
    """Tensor/layer dimension mismatch; message names the offending dimension."""


class AudioError(WinphoError):
    """Unreadable or unsupported audio input."""


class InventoryError(WinphoError):
    """Malformed phoneme inventory or unknown symbol in strict mode."""


class InfeasibleTargetError(WinphoError):
    """CTC target admits no valid alignment for the given frame count."""


class CheckpointError(WinphoError):
    """Corrupt checkpoint file or incompatible model configuration."""


class NonFiniteError(WinphoError):
    """A loss or parameter went NaN/inf; training aborts before saving."""
