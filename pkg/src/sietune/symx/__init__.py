"""Symbolic recovery of how a perf-const enters machine state."""

from . import expr
from .derive import (MultiTarget, NonConvergent, StateExpression,
                     StructureMismatch, SymxError, derive_expression,
                     derive_expressions, validate_expression)
from .fit import (DegenerateA, FitError, LinearMap, NonLinearMapping,
                  fit_linear_map)
from .match import (MatchCandidate, MatchedPair, ResolvedExpression,
                    match_expressions, resolve_linear)

__all__ = [name for name in dir() if not name.startswith("_")]
