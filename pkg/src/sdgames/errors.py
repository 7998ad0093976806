"""Exception types shared by every module."""

from __future__ import annotations


class InvalidArgument(ValueError):
    """A precondition on an argument was violated."""


class NumericalFailure(RuntimeError):
    """A simulation or regression produced unusable numbers.

    ``module`` names the component that failed, ``index`` is the time step
    (simulation) or node (backward solver) at which it happened.
    """

    def __init__(self, message: str, *, module: str = "", index: int | None = None):
        super().__init__(message)
        self.module = module
        self.index = index

    def to_dict(self) -> dict:
        return {
            "error": "numerical-failure",
            "module": self.module,
            "index": self.index,
            "message": str(self),
        }


class IterationFailure(RuntimeError):
    """A fixed-point iteration did not meet its tolerance within the budget."""

    def __init__(self, message: str, trace: list[float], *, module: str = "mfg"):
        super().__init__(message)
        self.trace = list(trace)
        self.module = module

    def to_dict(self) -> dict:
        return {
            "error": "iteration-failure",
            "module": self.module,
            "message": str(self),
            "trace": self.trace,
        }
