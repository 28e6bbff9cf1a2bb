"""Exception types shared across the package."""


class AgnavError(Exception):
    """Base class for all package-specific errors."""


class PlacementExhausted(AgnavError):
    """Obstacles could not be placed without blocking start/goal."""


class ResolutionTooCoarse(AgnavError):
    """An obstacle is thinner than one voxel and would vanish."""


class OutOfSpan(AgnavError):
    """Evaluation time outside the valid knot span."""


class DegreeUnderflow(AgnavError):
    """Derivative requested of a degree-0 curve."""


class Underdetermined(AgnavError):
    """Too few waypoints to fit a curve."""


class NoPathError(AgnavError):
    """Search exhausted the open set without reaching the goal."""


class SearchTimeout(AgnavError):
    """Search exceeded its node-expansion budget."""


class MarchEscapedGrid(AgnavError):
    """Surface march left the grid before crossing a free boundary."""


class DegenerateSpacing(AgnavError):
    """Consecutive ground control points coincide."""


class Diverged(AgnavError):
    """Optimization cost became non-finite."""


class IoFailure(AgnavError):
    """Report export failed to write."""
