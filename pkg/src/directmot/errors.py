"""Exception types shared across the tracker."""


class DomainError(ValueError):
    """Input outside the domain of a geometric operation."""


class NotEnoughData(RuntimeError):
    """Too few valid pixels or points to run an estimator."""


class Diverged(RuntimeError):
    """An optimizer could not decrease its cost from the initial estimate."""


class TrackLost(RuntimeError):
    """Neither 3D nor 2D tracking could follow the object."""


class InsufficientHistory(RuntimeError):
    """A track has no usable motion model yet."""


class InsufficientGeometry(RuntimeError):
    """Too few 3D points to regress a bounding box."""


class ConsistencyError(RuntimeError):
    """Internal bookkeeping invariant violated."""
