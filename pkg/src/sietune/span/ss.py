"""Safe spans: single-entry, multi-exit scopes confining const-derived state.

A safe span's members are the forward thin slice from a critical span,
plus the span's own contributors.  Exits are the first non-member
addresses on paths where no further dependence can execute; back edges
keep the span open, so a thread looping over const-derived state never
appears outside it.  Per-function hull intervals give the residency test
used by transition monitors and stack scans.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from ..minicc.build import BuildArtifact
from ..mvm import isa
from ..mvm.program import Program
from .cs import CriticalSpan
from .slicer import EscapedDependence, Slicer


@dataclass
class SafeSpan:
    const_id: str
    entry: int
    exits: List[int]
    members: Set[Tuple[str, int]]
    hulls: Dict[str, Tuple[int, int]]            # member min/max per function
    covered: Dict[str, frozenset] = field(default_factory=dict)
    program: Program = field(repr=False, default=None)

    def functions(self) -> List[str]:
        return sorted(self.hulls)

    def hull_contains(self, addr: int) -> bool:
        fn = self.program.function_of(addr)
        h = self.hulls.get(fn)
        return h is not None and h[0] <= addr <= h[1]

    def covers(self, addr: int) -> bool:
        """Inside the span's path-closed region (loop bodies included)."""
        fn = self.program.function_of(addr)
        c = self.covered.get(fn)
        return c is not None and addr in c

    def render(self) -> str:
        hulls = ", ".join(f"{fn}[{lo:#x},{hi:#x}]"
                          for fn, (lo, hi) in sorted(self.hulls.items()))
        exits = "/".join(f"{e:#x}" for e in self.exits)
        return f"SS(entry={self.entry:#x}, exits={exits}, {hulls})"


def _call_sites(program: Program) -> Dict[str, List[int]]:
    sites: Dict[str, List[int]] = {}
    for ins in program.instructions:
        if ins.opcode == isa.CALL:
            callee = program.function_of(ins.jump_target())
            sites.setdefault(callee, []).append(ins.address)
    return sites


def compute_exits(program: Program,
                  members: Set[Tuple[str, int]]) -> List[int]:
    """First non-member successors from which no member is reachable."""
    member_addrs = {addr for _, addr in members}
    by_fn: Dict[str, Set[int]] = {}
    for fn, addr in members:
        by_fn.setdefault(fn, set()).add(addr)
    sites = _call_sites(program)
    exits: Set[int] = set()

    for fn, addrs in by_fn.items():
        # block-level reachability to a member, within this function
        blocks = program.function(fn).blocks
        has_member: Dict[int, bool] = {}
        for b in blocks:
            has_member[b.start] = any(a in member_addrs for a in b.addrs)

        def member_reachable_from(addr: int) -> bool:
            blk = program.block_of(addr)
            if any(a >= addr and a in member_addrs for a in blk.addrs):
                return True
            seen = set()
            stack = list(blk.succs)
            while stack:
                s = stack.pop()
                if s in seen:
                    continue
                seen.add(s)
                if has_member.get(s):
                    return True
                sblk = program.block_of(s)
                if sblk is not None:
                    stack.extend(sblk.succs)
            return False

        for addr in addrs:
            ins = program.instr_at(addr)
            succs: List[int] = []
            if ins.opcode == isa.RET:
                if not sites.get(fn):
                    exits.add(addr)   # no caller: the span ends at the return
                continue
            blk = program.block_of(addr)
            if addr == blk.end:
                succs = list(blk.succs)
            else:
                nxt = program.next_addr(addr)
                if nxt is not None:
                    succs = [nxt]
            for s in succs:
                if s in member_addrs:
                    continue
                if not member_reachable_from(s):
                    exits.add(s)
    return sorted(exits)


def _hulls(program: Program,
           members: Set[Tuple[str, int]]) -> Dict[str, Tuple[int, int]]:
    """Per-function member intervals; exits sit just outside them."""
    hulls: Dict[str, List[int]] = {}
    for fn, addr in members:
        hulls.setdefault(fn, []).append(addr)
    return {fn: (min(addrs), max(addrs)) for fn, addrs in hulls.items()}


def _succ_map(program: Program, fn: str) -> Dict[int, List[int]]:
    succs: Dict[int, List[int]] = {}
    for block in program.function(fn).blocks:
        for addr in block.addrs:
            if addr == block.end:
                succs[addr] = list(block.succs)
            else:
                succs[addr] = [program.next_addr(addr)]
    return succs


def _covered_sets(program: Program,
                  members: Set[Tuple[str, int]]) -> Dict[str, frozenset]:
    """Addresses on member-to-member paths, per function.

    This is the region a thread can occupy while still carrying or about
    to consume span state: reachable from a member and able to reach one
    (so loop bodies between consumptions stay inside; code past the last
    consumer on a path does not).
    """
    by_fn: Dict[str, Set[int]] = {}
    for fn, addr in members:
        by_fn.setdefault(fn, set()).add(addr)
    out: Dict[str, frozenset] = {}
    for fn, maddrs in by_fn.items():
        succs = _succ_map(program, fn)
        preds: Dict[int, List[int]] = {}
        for a, ss in succs.items():
            for s in ss:
                preds.setdefault(s, []).append(a)

        def closure(start: Set[int], edges: Dict[int, List[int]]) -> Set[int]:
            seen = set(start)
            stack = list(start)
            while stack:
                a = stack.pop()
                for b in edges.get(a, ()):
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
            return seen

        fwd = closure(set(maddrs), succs)
        bwd = closure(set(maddrs), preds)
        out[fn] = frozenset((fwd & bwd) | maddrs)
    return out


def build_safe_span(artifact: BuildArtifact, cs: CriticalSpan) -> SafeSpan:
    """Forward thin slice from the critical span's effect."""
    program = artifact.program
    seeds = frozenset(cs.expression.cluster.seed_addresses)
    slicer = Slicer(program, seeds)
    members = slicer.run()
    for addr in cs.expression.contributors:
        members.add((cs.function, addr))
    exits = compute_exits(program, members)
    covered = _covered_sets(program, members)
    entry = min(covered[cs.function])
    return SafeSpan(const_id=cs.const_id, entry=entry, exits=exits,
                    members=members, hulls=_hulls(program, members),
                    covered=covered, program=program)


def merge_safe_spans(spans: List[SafeSpan]) -> List[SafeSpan]:
    """Union overlapping or member-sharing spans of one const."""
    if not spans:
        return []
    assert len({s.const_id for s in spans}) == 1, "spans must share a const"
    items = [s for s in spans]

    def overlaps(a: SafeSpan, b: SafeSpan) -> bool:
        if a.members & b.members:
            return True
        for fn, (lo, hi) in a.hulls.items():
            other = b.hulls.get(fn)
            if other and not (hi < other[0] or other[1] < lo):
                return True
        return False

    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                if overlaps(items[i], items[j]):
                    a, b = items[i], items[j]
                    members = a.members | b.members
                    program = a.program
                    exits = compute_exits(program, members)
                    merged = SafeSpan(
                        const_id=a.const_id, entry=min(a.entry, b.entry),
                        exits=exits, members=members,
                        hulls=_hulls(program, members), program=program)
                    items = ([items[k] for k in range(len(items))
                              if k not in (i, j)] + [merged])
                    changed = True
                    break
            if changed:
                break
    return sorted(items, key=lambda s: s.entry)
