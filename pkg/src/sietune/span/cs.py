"""Critical spans: the binary scope of one const occurrence.

A critical span runs from the first instruction contributing to the
recovered expression to the last, inside one basic block.  Interleaved
instructions that contribute nothing still execute inside it.  The first
consumer of the resulting state (or the block end) bounds where the
synthesized update must fire.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..minicc.build import BuildArtifact
from ..mvm import isa
from ..symx.derive import StateExpression
from ..symx.fit import LinearMap


class SpanError(Exception):
    pass


class CrossBlockExpression(SpanError):
    """Contributors span basic blocks; not a well-formed critical span."""


@dataclass
class CriticalSpan:
    const_id: str
    function: str
    start: int               # first contributing instruction
    end: int                 # last contributing instruction
    exit_addr: Optional[int]  # instruction right after the span, if any
    expression: StateExpression
    linear_map: LinearMap

    @property
    def target(self) -> tuple:
        return self.expression.target

    def contains(self, addr: int) -> bool:
        return self.start <= addr <= self.end

    def render(self) -> str:
        return (f"{self.function}[{self.start:#x},{self.end:#x}] "
                f"{self.expression.render()}")


def build_critical_span(artifact: BuildArtifact, expression: StateExpression,
                        linear_map: LinearMap,
                        const_id: str) -> CriticalSpan:
    contributors = expression.contributors
    if not contributors:
        raise SpanError("expression has no contributing instructions")
    program = artifact.program
    blocks = {program.block_of(a).start for a in contributors}
    if len(blocks) != 1:
        raise CrossBlockExpression(
            f"contributors span blocks {sorted(hex(b) for b in blocks)}")
    start, end = min(contributors), max(contributors)
    fn = program.function_of(start)
    block = program.block_of(start)

    # first in-block consumer of the target after the span, else block end;
    # the update must fire before control passes this address
    exit_addr = None
    target = expression.target
    for addr in block.addrs:
        if addr <= end:
            continue
        ins = program.instr_at(addr)
        if _consumes(ins, target):
            exit_addr = addr
            break
    if exit_addr is None:
        nxt = program.next_addr(end)
        exit_addr = nxt   # may be None at the very end of the program
    return CriticalSpan(const_id=const_id, function=fn, start=start, end=end,
                        exit_addr=exit_addr, expression=expression,
                        linear_map=linear_map)


def _consumes(ins, target: tuple) -> bool:
    if target[0] == "r":
        return target[1] in ins.regs_read()
    if target[0] == "flags":
        return ins.reads_flags()
    if target[0] == "mem":
        # a read of the slot is operand 1 of LOAD/ALU/CMP; a STORE to the
        # slot overwrites rather than consumes
        if ins.opcode == isa.STORE:
            return False
        if len(ins.operands) > 1:
            op = ins.operands[1]
            return (isa.is_mem(op) and op[1] == target[1] and op[2] is None
                    and op[3] == target[2])
    return False
