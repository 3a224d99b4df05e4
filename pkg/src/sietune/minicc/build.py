"""Build entry point: source unit + value overrides + passes -> artifact.

The artifact couples the lowered Program with the coarse metadata a
binary-diff pipeline needs: a statement-level debug map, deliberately
line-granular per-const candidate sites, and the recorded noise addresses
so diffs can be validated as noise-free.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from ..mvm.program import Program
from .ast import PerfConstSpec, SourceUnit, parse_source
from .codegen import DebugRange, Lowerer
from .interp import interpret
from .passes import (UnknownConst, UnsupportedStatement,
                     eliminate_dead_assignments, fold_constants,
                     inline_functions, propagate_constants, substitute_consts)

ALL_PASSES = frozenset({"fold", "propagate", "strength", "immmerge", "dce", "noise"})
DEFAULT_PASSES = ALL_PASSES
DEFAULT_NOISE_SEED = 0xC0FFEE


@dataclass
class BuildArtifact:
    program: Program
    unit: SourceUnit                      # original (pre-pass) unit
    values: Dict[str, int]                # effective const values in this build
    passes: frozenset
    noise_seed: int
    debug_map: Dict[tuple, DebugRange]
    const_sites: Dict[str, List[Tuple[str, int, int]]]
    noise_addresses: Set[int]
    imm_provenance: Dict[int, FrozenSet[str]]
    build_id: str = ""

    def site_ranges(self, const_id: str) -> List[Tuple[str, int, int]]:
        return self.const_sites.get(const_id, [])

    def in_const_sites(self, const_id: str, fn: str, addr: int) -> bool:
        return any(f == fn and lo <= addr <= hi
                   for f, lo, hi in self.site_ranges(const_id))


def normalize_passes(passes) -> frozenset:
    if passes is None:
        return DEFAULT_PASSES
    ps = frozenset(passes)
    unknown = ps - ALL_PASSES
    if unknown:
        raise ValueError(f"unknown passes: {sorted(unknown)}")
    return ps


def build(source: SourceUnit, overrides: Optional[Dict[str, int]] = None,
          passes=None, noise_seed: int = DEFAULT_NOISE_SEED) -> BuildArtifact:
    """Lower a source unit to an MVM program, deterministically.

    ``overrides`` replaces the annotated default of the named consts for
    this build only; unknown ids raise UnknownConst.
    """
    ps = normalize_passes(passes)
    values = {c.const_id: c.value_v for c in source.const_tokens}
    for cid, v in (overrides or {}).items():
        if cid not in values:
            raise UnknownConst(f"no perf-const {cid!r} in unit {source.name!r}")
        values[cid] = v

    unit = substitute_consts(source, values)
    unit = inline_functions(unit)
    if "fold" in ps:
        unit = fold_constants(unit)
    if "propagate" in ps:
        unit = propagate_constants(unit)
        if "fold" in ps:
            unit = fold_constants(unit)
    if "dce" in ps:
        unit = eliminate_dead_assignments(unit)

    lowering = Lowerer(unit, ps, noise_seed).lower()
    program = lowering.program()
    art = BuildArtifact(
        program=program, unit=source, values=values, passes=ps,
        noise_seed=noise_seed, debug_map=lowering.debug_map,
        const_sites=lowering.const_sites,
        noise_addresses=lowering.noise_addresses,
        imm_provenance=lowering.imm_provenance)
    art.build_id = _build_id(source, values, ps, noise_seed)
    return art


def _build_id(source: SourceUnit, values: Dict[str, int], passes: frozenset,
              noise_seed: int) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(values.items())).encode())
    h.update(repr(sorted(passes)).encode())
    h.update(str(noise_seed).encode())
    h.update(source.name.encode())
    for f in source.functions:
        h.update(repr((f.name, f.params, [repr(s) for s in f.body])).encode())
    return h.hexdigest()[:16]


def build_from_text(text: str, overrides: Optional[Dict[str, int]] = None,
                    passes=None, noise_seed: int = DEFAULT_NOISE_SEED,
                    name: str = "unit") -> BuildArtifact:
    return build(parse_source(text, name), overrides, passes, noise_seed)
