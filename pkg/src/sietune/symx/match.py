"""Cross-build matching of derived expressions and IV resolution.

Two symbolic derivations of the same cluster, from builds with different
const values, must share a canonical form; the constant slots where they
disagree are the candidate positions of the transformed value.  Each
canonicalization branch yields at most one candidate; the caller keeps the
first candidate whose (V, IV) pairs sustain an exact integral linear map
against a third calibration point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from . import expr as E
from .derive import REGIMES, StateExpression, StructureMismatch
from .fit import (DegenerateA, FitError, LinearMap, NonLinearMapping,
                  fit_linear_map)


@dataclass
class MatchCandidate:
    regime: str
    holed: tuple            # tree with IV holes
    iv_a: int
    iv_b: int


@dataclass
class MatchedPair:
    expr_a: StateExpression
    expr_b: StateExpression
    candidates: List[MatchCandidate]


def match_expressions(expr_a: StateExpression,
                      expr_b: StateExpression) -> MatchedPair:
    """Align two per-build derivations of one cluster target.

    Raises StructureMismatch when no branch pair shares a shape, or when a
    branch disagrees at more than one independent constant slot (a second
    unresolved unknown).
    """
    if expr_a.target != expr_b.target:
        raise StructureMismatch(
            f"targets differ: {expr_a.render()} vs {expr_b.render()}")
    candidates: List[MatchCandidate] = []
    shape_matched = False
    for regime in REGIMES:
        ta = expr_a.branches.get(regime)
        tb = expr_b.branches.get(regime)
        if ta is None or tb is None:
            continue
        diffs = E.unify(ta, tb)
        if diffs is None:
            continue
        shape_matched = True
        if not diffs:
            continue   # identical trees under this regime: no slot to tune
        groups = {(ca, cb) for _, ca, cb in diffs}
        if len(groups) != 1:
            continue   # more than one unknown in this regime
        (ca, cb) = next(iter(groups))
        paths = {p for p, _, _ in diffs}
        candidates.append(MatchCandidate(
            regime=regime, holed=E.hole_at_paths(ta, paths), iv_a=ca, iv_b=cb))
    if not shape_matched:
        raise StructureMismatch(
            f"no common form for target {expr_a.target}: "
            f"{expr_a.render()} vs {expr_b.render()}")
    if not candidates:
        # shapes agree everywhere: the builds are observationally identical
        return MatchedPair(expr_a=expr_a, expr_b=expr_b, candidates=[])
    return MatchedPair(expr_a=expr_a, expr_b=expr_b, candidates=candidates)


@dataclass
class ResolvedExpression:
    """A matched, linearly-fitted expression ready for span construction."""
    expression: StateExpression      # holed expr + base-build concrete IV
    linear_map: LinearMap
    regime: str


def resolve_linear(pair: MatchedPair, v_a: int, v_b: int,
                   third: Optional[Tuple[int, StateExpression]] = None
                   ) -> ResolvedExpression:
    """Pick the first candidate that fits an integral linear map exactly.

    ``third`` supplies (value, derivation) of an additional build, used
    both as the zero-residual check and as the expression anchored in the
    result (the deployed build in the offline pipeline).
    """
    last_fit_error: Optional[FitError] = None
    if not pair.candidates:
        raise DegenerateA("matched expressions carry no differing slot")
    for cand in pair.candidates:
        check = None
        anchored = None
        if third is not None:
            v3, expr3 = third
            tree3 = expr3.branches.get(cand.regime)
            iv3 = E.extract_iv(cand.holed, tree3) if tree3 is not None else None
            if iv3 is None:
                continue
            check = (v3, iv3)
            anchored = (expr3, iv3)
        try:
            m = fit_linear_map([(v_a, cand.iv_a), (v_b, cand.iv_b)], check=check)
        except NonLinearMapping as exc:
            last_fit_error = exc
            continue
        except DegenerateA as exc:
            last_fit_error = exc
            continue
        if anchored is not None:
            se, iv = anchored
            out = StateExpression(
                target=se.target, expr=cand.holed, concrete_iv=iv,
                branches=se.branches, cluster=se.cluster,
                contributors=se.contributors, function=se.function)
        else:
            se = pair.expr_a
            out = StateExpression(
                target=se.target, expr=cand.holed, concrete_iv=cand.iv_a,
                branches=se.branches, cluster=se.cluster,
                contributors=se.contributors, function=se.function)
        return ResolvedExpression(expression=out, linear_map=m,
                                  regime=cand.regime)
    if last_fit_error is not None:
        raise last_fit_error
    raise StructureMismatch("no candidate slot could anchor the third build")
