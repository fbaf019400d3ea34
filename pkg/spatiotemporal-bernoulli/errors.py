"""
Exception hierarchy for the spatio-temporal Bernoulli toolkit.
Every message names the offending value so CLI users can act on it.
"""

from typing import Optional

import numpy as np


class BernoulliError(Exception):
    """Root of all toolkit errors"""


class RangeError(BernoulliError, IndexError):
    """Semantic index or state value outside its declared range"""


class FeasibilityError(BernoulliError, ValueError):
    """Parameter vector produces probabilities outside [0, 1]"""


class DomainError(BernoulliError, ValueError):
    """Linear index left the domain of the link / likelihood"""

    def __init__(self, message: str, t: Optional[int] = None, k: Optional[int] = None):
        super().__init__(message)
        self.t = t
        self.k = k


class NumericalError(BernoulliError, ArithmeticError):
    """Round-off pushed a quantity outside its admissible range"""


class ConvergenceError(BernoulliError, RuntimeError):
    """Iterative routine stopped before meeting its tolerance"""

    def __init__(self, message: str, iterate: Optional[np.ndarray] = None,
                 residual: float = float("nan")):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual


class InitializationError(BernoulliError, RuntimeError):
    """No strictly feasible starting point could be built"""


class ConditionError(BernoulliError, ValueError):
    """Matrix is singular where a positive definite one is required"""


class SpecMismatchError(BernoulliError, ValueError):
    """Loaded artifact was written for a different model spec"""

    def __init__(self, expected, found):
        super().__init__(f"Spec mismatch: expected {expected}, file carries {found}")
        self.expected = expected
        self.found = found


class IngestError(BernoulliError, ValueError):
    """Event CSV row could not be mapped onto the grid"""


class ConfigError(BernoulliError, ValueError):
    """Experiment / grid configuration is malformed"""
