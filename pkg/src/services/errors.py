"""
Exception hierarchy shared by the joint-model engine and the CLI.

The CLI maps these onto exit codes: validation-type errors exit 2,
convergence-type errors exit 3.
"""

from typing import List, Optional


class JointModelError(Exception):
    """Base class for every engine error"""
    pass


class ModelSpecError(JointModelError):
    """Raised when a model document or its defaults are invalid"""
    def __init__(self, message: str, validation_errors: Optional[List[str]] = None):
        super().__init__(message)
        self.validation_errors = validation_errors or []


class DataValidationError(JointModelError):
    """Raised when data tables do not support the declared model"""
    def __init__(self, message: str, validation_errors: Optional[List[str]] = None):
        super().__init__(message)
        self.validation_errors = validation_errors or []


class LikelihoodDomainError(JointModelError):
    """Raised for responses outside a family's support or non-finite predictors"""
    pass


class ConvergenceError(JointModelError):
    """Raised when an iterative solver exhausts its iteration budget"""
    def __init__(self, message: str, iterations: int = 0):
        super().__init__(message)
        self.iterations = iterations


class IndefiniteHessianError(ConvergenceError):
    """Raised when the hyperparameter Hessian at the mode is not negative definite"""
    pass


class SeparationError(JointModelError):
    """Raised when a Cox fit diverges towards an unbounded estimate"""
    pass


class ArchiveError(JointModelError):
    """Raised when a fit archive is missing, corrupt or from another version"""
    pass


class PredictionError(JointModelError):
    """Raised when a prediction request cannot be served"""
    pass
