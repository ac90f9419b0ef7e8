"""Exception types shared across the planner modules."""


class PlannerError(Exception):
    """Base class for every error raised by this package."""


class MapError(PlannerError):
    """Invalid lane map (broken topology, bad sampling, missing lanes)."""


class ProjectionOutOfRange(PlannerError):
    pass


class NoSuchNeighbor(PlannerError):
    pass


class NonPositiveGap(PlannerError):
    """IDM was asked for an acceleration behind a leader it already overlaps."""


class PathExhausted(PlannerError):
    pass


class OffMap(PlannerError):
    pass


class EmptyActionSet(PlannerError):
    pass


class TooManyCombinations(PlannerError):
    pass


class NoFeasiblePolicy(PlannerError):
    pass


class EmptyLog(PlannerError):
    pass


class MalformedLog(PlannerError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
