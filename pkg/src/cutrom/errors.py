"""Exception types shared across the package."""


class CutRomError(Exception):
    """Base class for all package errors."""


class AnchorOnInterface(CutRomError):
    """Fluid-sign calibration anchor sits on the levelset zero set."""


class DegenerateRect(CutRomError):
    """Requested background rectangle is smaller than the mesh size."""


class NotCut(CutRomError):
    """Operation requires a cut triangle but vertex signs are uniform."""


class SolidElement(CutRomError):
    """Operation requires an active (fluid or cut) element."""


class IncompatibleLifting(CutRomError):
    """Constant lifting of the inlet data would violate the wall condition."""


class InactiveState(CutRomError):
    """State vector carries nonzero entries on inactive dofs."""


class NewtonDiverged(CutRomError):
    """Newton iteration failed; carries the last iterate and residual history."""

    def __init__(self, message, iterate=None, history=None):
        super().__init__(message)
        self.iterate = iterate
        self.history = list(history) if history is not None else []


class ShapeMismatch(CutRomError):
    """Snapshot length disagrees with the expected dof count."""


class MissingSnapshot(CutRomError):
    """Manifest references a snapshot file that does not exist."""


class RankDeficient(CutRomError):
    """Requested more POD modes than the snapshot set supports."""


class ZeroReference(CutRomError):
    """Relative error requested against a zero reference field."""


class ParseError(CutRomError):
    """Run configuration file could not be parsed."""


class ValidationError(CutRomError):
    """Run configuration carries an invalid or unknown entry."""


class IoError(CutRomError):
    """File export failed."""


class SolverBudgetExceeded(CutRomError):
    """More than the allowed fraction of offline solves failed."""
