"""loofit: parameter estimation for lattice Gaussian Markov random fields by
maximising leave-one-out cross-validation scores under proper scoring rules."""

__version__ = "0.1.0"

from .scoring import GaussPredictive, RuleKind, ScoringRule, score
from .gmrf import LatticeSpec, ModelKind, ModelSpec, Theta, Dataset
from .estimators import FitOptions, FitResult, GodambeResult, Method, fit, parse_method

__all__ = [
    "__version__",
    "GaussPredictive",
    "RuleKind",
    "ScoringRule",
    "score",
    "LatticeSpec",
    "ModelKind",
    "ModelSpec",
    "Theta",
    "Dataset",
    "FitOptions",
    "FitResult",
    "GodambeResult",
    "Method",
    "fit",
    "parse_method",
]
