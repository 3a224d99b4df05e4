"""Offline per-const analysis: from source to spans and indirections.

For each const the pipeline builds the deployed binary plus two probe
builds at distinct magic values, diffs them for seeds, derives and matches
symbolic expressions per cluster, fits the linear value map (with the
deployed build as the exact third calibration point), constructs critical
and safe spans, and synthesizes probe plans.  Per-const failures are
recorded as untunable-with-reason rather than raised, so one stubborn
const never sinks a build.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import seeddiff, synth
from .minicc.ast import SourceUnit
from .minicc.build import (DEFAULT_NOISE_SEED, DEFAULT_PASSES, BuildArtifact,
                           build)
from .span.cs import CriticalSpan, SpanError, build_critical_span
from .span.slicer import EscapedDependence
from .span.ss import SafeSpan, build_safe_span, merge_safe_spans
from .symx import (DegenerateA, FitError, LinearMap, NonLinearMapping,
                   StructureMismatch, SymxError, derive_expressions,
                   match_expressions, resolve_linear)
from .symx.derive import occurrence_clusters
from .symx.derive import StateExpression

DEFAULT_MAGIC_OFFSETS = (7, 13)


class AnalysisError(Exception):
    pass


@dataclass
class ConstAnalysis:
    const_id: str
    value: int
    tunable: bool
    reason: str = ""                       # untunable reason, if any
    linear_map: Optional[LinearMap] = None
    expressions: List[StateExpression] = field(default_factory=list)
    critical_spans: List[CriticalSpan] = field(default_factory=list)
    safe_spans: List[SafeSpan] = field(default_factory=list)
    indirections: List[synth.Indirection] = field(default_factory=list)
    seed_addresses: Tuple[int, ...] = ()


@dataclass
class BuildAnalysis:
    source: SourceUnit
    base: BuildArtifact
    consts: Dict[str, ConstAnalysis]
    passes: frozenset
    noise_seed: int

    def tunable(self) -> List[str]:
        return sorted(cid for cid, a in self.consts.items() if a.tunable)


def magic_values(v: int, magic: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
    if magic is not None:
        v1, v2 = magic
    else:
        v1, v2 = v + DEFAULT_MAGIC_OFFSETS[0], v + DEFAULT_MAGIC_OFFSETS[1]
    if len({v, v1, v2}) != 3:
        raise AnalysisError(f"magic values must be pairwise distinct: {v, v1, v2}")
    return v1, v2


def _derive_per_cluster(artifact: BuildArtifact, other: BuildArtifact,
                        const_id: str):
    seeds = seeddiff.find_seeds(artifact, other, const_id)
    derived = []
    for block_cluster in seeds.clusters(artifact):
        for cluster in occurrence_clusters(artifact, block_cluster):
            exprs = {se.target: se
                     for se in derive_expressions(artifact, cluster)}
            derived.append((cluster, exprs))
    return seeds, derived


def analyze_constant(source: SourceUnit, const_id: str,
                     passes=DEFAULT_PASSES, noise_seed: int = DEFAULT_NOISE_SEED,
                     magic: Optional[Tuple[int, int]] = None,
                     base: Optional[BuildArtifact] = None,
                     allow_branch_opt: bool = True) -> ConstAnalysis:
    spec = source.const(const_id)
    v = spec.value_v
    if base is None:
        base = build(source, passes=passes, noise_seed=noise_seed)
    v1, v2 = magic_values(v, magic)

    def untunable(reason: str) -> ConstAnalysis:
        return ConstAnalysis(const_id=const_id, value=v, tunable=False,
                             reason=reason)

    try:
        p1 = build(source, overrides={const_id: v1}, passes=passes,
                   noise_seed=noise_seed)
        p2 = build(source, overrides={const_id: v2}, passes=passes,
                   noise_seed=noise_seed)
        seeds_base, der_base = _derive_per_cluster(base, p1, const_id)
        _, der_p1 = _derive_per_cluster(p1, base, const_id)
        _, der_p2 = _derive_per_cluster(p2, base, const_id)
    except seeddiff.EmptyDiff as exc:
        return untunable(f"EmptyDiff: {exc}")
    except seeddiff.UnalignableFunction as exc:
        return untunable(f"UnalignableFunction: {exc}")
    except SymxError as exc:
        return untunable(f"{type(exc).__name__}: {exc}")

    if not (len(der_base) == len(der_p1) == len(der_p2)):
        return untunable(
            f"ClusterMismatch: {len(der_base)}/{len(der_p1)}/{len(der_p2)} "
            f"clusters across builds")

    resolved: List[Tuple[StateExpression, LinearMap]] = []
    last_error: Optional[Exception] = None
    for (cb, eb), (c1, e1), (c2, e2) in zip(der_base, der_p1, der_p2):
        if not (cb.function == c1.function == c2.function):
            return untunable("ClusterMismatch: function order diverged")
        common = sorted(set(eb) & set(e1) & set(e2),
                        key=lambda t: (t[0], str(t[1:])))
        for target in common:
            try:
                pair = match_expressions(e1[target], e2[target])
            except StructureMismatch as exc:
                last_error = exc
                continue
            if not pair.candidates:
                continue   # this target does not carry the transformed value
            try:
                res = resolve_linear(pair, v1, v2, third=(v, eb[target]))
            except (NonLinearMapping, DegenerateA, StructureMismatch) as exc:
                last_error = exc
                continue
            resolved.append((res.expression, res.linear_map))

    if not resolved:
        if last_error is not None:
            return untunable(f"{type(last_error).__name__}: {last_error}")
        return untunable("NoExpressibleTarget: no IV-dependent state found")

    maps = {(m.a, m.b) for _, m in resolved}
    if len(maps) != 1:
        return untunable(
            f"AmbiguousMapping: {len(maps)} distinct linear maps across spans")
    linear_map = resolved[0][1]
    if not linear_map.is_integral:
        return untunable(f"NonIntegralMap: {linear_map.render()}")

    css: List[CriticalSpan] = []
    sss: List[SafeSpan] = []
    inds: List[synth.Indirection] = []
    try:
        for se, m in resolved:
            cs = build_critical_span(base, se, m, const_id)
            css.append(cs)
            sss.append(build_safe_span(base, cs))
            ind = synth.synthesize(cs, base)
            inds.append(synth.plan_probes(ind, base,
                                          allow_branch_opt=allow_branch_opt))
        merged = merge_safe_spans(sss)
    except (SpanError, EscapedDependence, synth.SynthError) as exc:
        return untunable(f"{type(exc).__name__}: {exc}")

    return ConstAnalysis(
        const_id=const_id, value=v, tunable=True, linear_map=linear_map,
        expressions=[se for se, _ in resolved], critical_spans=css,
        safe_spans=merged, indirections=inds,
        seed_addresses=tuple(sorted(seeds_base.addresses())))


def analyze_unit(source: SourceUnit, const_ids: Optional[List[str]] = None,
                 passes=DEFAULT_PASSES, noise_seed: int = DEFAULT_NOISE_SEED,
                 magic: Optional[Tuple[int, int]] = None,
                 allow_branch_opt: bool = True) -> BuildAnalysis:
    base = build(source, passes=passes, noise_seed=noise_seed)
    ids = const_ids if const_ids is not None else \
        [c.const_id for c in source.const_tokens]
    consts = {}
    for cid in ids:
        consts[cid] = analyze_constant(
            source, cid, passes=passes, noise_seed=noise_seed, magic=magic,
            base=base, allow_branch_opt=allow_branch_opt)
    return BuildAnalysis(source=source, base=base, consts=consts,
                         passes=frozenset(passes), noise_seed=noise_seed)
