"""Seed finding: diff two builds of the same unit that differ in one const.

Per-function alignment is a longest-common-subsequence over normalized
instructions (addresses and jump displacements erased, other operands
kept).  Base-side instructions that fail to match, restricted to the
const's candidate site ranges, are the seeds.  Recorded interleaving-noise
instructions are discarded from the diff and counted.  Where the probe
build inserts instructions with no base counterpart (an instruction-count
change), the base instructions bordering the gap join the seed set so the
symbolic stage sees the whole cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .minicc.build import BuildArtifact
from .mvm.isa import Instruction


class SeedDiffError(Exception):
    pass


class EmptyDiff(SeedDiffError):
    """The builds are instruction-identical: the const is dead at this site."""


class UnalignableFunction(SeedDiffError):
    """Diff outside the const's sites and not noise: pass nondeterminism."""


@dataclass(frozen=True)
class Seed:
    function: str
    base_address: int
    base_instr: Instruction
    probe_instr: Optional[Instruction]   # aligned counterpart, if any


@dataclass
class SeedSet:
    const_id: str
    seeds: List[Seed]
    noise_filtered: int = 0

    def addresses(self) -> Set[int]:
        return {s.base_address for s in self.seeds}

    def clusters(self, artifact: BuildArtifact) -> List["SeedCluster"]:
        """Group seeds by basic block of the base build, in address order."""
        by_block: Dict[int, List[Seed]] = {}
        for s in self.seeds:
            blk = artifact.program.block_of(s.base_address)
            by_block.setdefault(blk.start, []).append(s)
        out = []
        for start in sorted(by_block):
            blk = artifact.program.block_of(start)
            seeds = sorted(by_block[start], key=lambda s: s.base_address)
            out.append(SeedCluster(const_id=self.const_id,
                                   function=seeds[0].function,
                                   block_start=blk.start,
                                   seed_addresses=tuple(s.base_address
                                                        for s in seeds)))
        return out


@dataclass(frozen=True)
class SeedCluster:
    const_id: str
    function: str
    block_start: int
    seed_addresses: Tuple[int, ...]


def lcs_pairs(a: Sequence, b: Sequence) -> List[Tuple[int, int]]:
    """Index pairs of one longest common subsequence (classic DP)."""
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = dp[i], dp[i + 1]
        ai = a[i]
        for j in range(m - 1, -1, -1):
            if ai == b[j]:
                row[j] = nxt[j + 1] + 1
            else:
                row[j] = nxt[j] if nxt[j] >= row[j + 1] else row[j + 1]
    out = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            out.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return out


def find_seeds(base: BuildArtifact, probe: BuildArtifact,
               const_id: str) -> SeedSet:
    """Diff base against a build with a different value for ``const_id``."""
    if const_id not in base.values:
        raise SeedDiffError(f"unknown const {const_id!r}")
    seeds: List[Seed] = []
    noise_filtered = 0
    unexplained: List[Tuple[str, int]] = []
    any_diff = False

    for fn in base.program.functions:
        base_instrs = base.program.function_instructions(fn.name)
        try:
            probe_instrs = probe.program.function_instructions(fn.name)
        except KeyError:
            raise UnalignableFunction(f"function {fn.name!r} missing in probe build")
        pairs = lcs_pairs([i.key() for i in base_instrs],
                          [i.key() for i in probe_instrs])
        matched_base = {i for i, _ in pairs}
        matched_probe = {j for _, j in pairs}
        base_by_pos = dict(pairs)
        # positional pairing of unmatched instructions within each gap, so a
        # changed instruction reports its probe-build counterpart
        bounds = [(-1, -1)] + pairs + [(len(base_instrs), len(probe_instrs))]
        for (bi0, pj0), (bi1, pj1) in zip(bounds, bounds[1:]):
            gap_b = list(range(bi0 + 1, bi1))
            gap_p = list(range(pj0 + 1, pj1))
            for bi, pj in zip(gap_b, gap_p):
                base_by_pos.setdefault(bi, pj)

        fn_seed_addrs: Set[int] = set()
        for i, ins in enumerate(base_instrs):
            if i in matched_base:
                continue
            any_diff = True
            if ins.address in base.noise_addresses:
                noise_filtered += 1
                continue
            if base.in_const_sites(const_id, fn.name, ins.address):
                fn_seed_addrs.add(i)
            else:
                unexplained.append((fn.name, ins.address))

        # probe-side pure insertions (instruction-count growth in a gap):
        # include the base instructions bordering the gap
        for (bi0, pj0), (bi1, pj1) in zip(bounds, bounds[1:]):
            gap_b = list(range(bi0 + 1, bi1))
            gap_p = []
            for j in range(pj0 + 1, pj1):
                any_diff = True
                if probe_instrs[j].address in probe.noise_addresses:
                    noise_filtered += 1
                else:
                    gap_p.append(j)
            if len(gap_p) <= len(gap_b):
                continue
            for bi in (bi0, bi1):
                if 0 <= bi < len(base_instrs):
                    addr = base_instrs[bi].address
                    if base.in_const_sites(const_id, fn.name, addr):
                        fn_seed_addrs.add(bi)

        for i in sorted(fn_seed_addrs):
            ins = base_instrs[i]
            pj = base_by_pos.get(i)
            seeds.append(Seed(function=fn.name, base_address=ins.address,
                              base_instr=ins,
                              probe_instr=probe_instrs[pj] if pj is not None else None))

    if unexplained:
        raise UnalignableFunction(
            f"diff outside const sites for {const_id!r}: "
            + ", ".join(f"{f}@{a:#x}" for f, a in unexplained[:8]))
    if not any_diff:
        raise EmptyDiff(f"builds identical; {const_id!r} is dead at this site")
    if not seeds:
        raise EmptyDiff(
            f"no in-site differences for {const_id!r} (diff was only noise)")
    seeds.sort(key=lambda s: s.base_address)
    return SeedSet(const_id=const_id, seeds=seeds, noise_filtered=noise_filtered)


def render_report(seedset: SeedSet) -> str:
    lines = [f"const {seedset.const_id}: {len(seedset.seeds)} seed(s), "
             f"{seedset.noise_filtered} noise-filtered"]
    for s in seedset.seeds:
        counterpart = s.probe_instr.render() if s.probe_instr else "<absent>"
        lines.append(f"  {s.function} {s.base_address:#06x}: "
                     f"{s.base_instr.render()}  |  {counterpart}")
    return "\n".join(lines) + "\n"
