"""Surrogate value function reformulation and smoothing continuation for
bilevel programs."""

from .dsl import BilevelProblem, load_problem, parse_problem
from .expr import DomainError, Expr

__all__ = ["BilevelProblem", "DomainError", "Expr", "load_problem", "parse_problem"]
__version__ = "0.1.0"
