"""Exception types shared across the package."""


class Hand4dError(Exception):
    """Base class for all package-specific failures."""


class ShapeMismatch(Hand4dError):
    """An array argument has the wrong shape or feature width."""


class UnknownKind(Hand4dError):
    """A condition kind outside the supported set was requested."""


class LengthNotMultiple(Hand4dError):
    """Sequence length is not a multiple of the decoder segment length."""


class StepOutOfRange(Hand4dError):
    """Diffusion step index outside the schedule's valid range."""


class EmptyHandMask(Hand4dError):
    """Occlusion ratio is undefined for an empty hand mask."""


class DegenerateConfiguration(Hand4dError):
    """Point set too degenerate for an alignment solve."""


class SequenceTooShort(Hand4dError):
    """Too few frames for a finite-difference metric."""


class OddDimension(Hand4dError):
    """Rotary embedding needs an even channel count."""


class SplitMismatch(Hand4dError):
    """Rotary channel split does not add up to the head dimension."""


class HandLeavesFrustum(Hand4dError):
    """No camera draw kept the hand inside the image bounds."""


class MissingCheckpoint(Hand4dError):
    """A required checkpoint file is absent or unreadable."""


class NonFiniteLoss(Hand4dError):
    """Training produced NaN/Inf loss; aborting instead of continuing."""
