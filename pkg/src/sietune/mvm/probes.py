"""Probes: attachable pre-handlers with a two-tier cost model.

A probe fires before the instruction at its address executes.  Two kinds:

* ``JumpOptimized`` — direct-jump trampoline, 243 cycles per firing.
  Feasible only where the probed instruction is not a jump, is at least
  5 bytes long, and is not itself a jump destination.
* ``Breakpoint`` — trap-based, 1858 cycles per firing.  Always feasible.

At most one probe per address.  Post-handler semantics are not provided;
"after instruction X" is expressed by probing the textually next
instruction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional

from .isa import Instruction, JUMPS
from .program import Program

JUMP_OPTIMIZED = "JumpOptimized"
BREAKPOINT = "Breakpoint"

JUMP_OPTIMIZED_CYCLES = 243
BREAKPOINT_CYCLES = 1858
UPDATE_CYCLES = 20
INSTRUCTION_UNIT_COST = 1

MIN_JUMP_OPT_BYTES = 5


class ProbeError(Exception):
    pass


class ProbeConflict(ProbeError):
    pass


class OptimizationInfeasible(ProbeError):
    pass


@dataclass(frozen=True)
class Probe:
    address: int
    kind: str
    handler_id: str

    @property
    def cost_cycles(self) -> int:
        return JUMP_OPTIMIZED_CYCLES if self.kind == JUMP_OPTIMIZED else BREAKPOINT_CYCLES


def jump_opt_feasible(program: Program, address: int) -> bool:
    ins = program.instr_at(address)
    if ins is None:
        return False
    if ins.opcode in JUMPS:
        return False
    if ins.byte_length < MIN_JUMP_OPT_BYTES:
        return False
    if address in program.jump_targets:
        return False
    return True


class ProbeSet:
    """The active probe table plus the handler registry."""

    def __init__(self, program: Program):
        self.program = program
        self._probes: Dict[int, Probe] = {}
        self._handlers: Dict[str, Callable] = {}
        self._seq = 0

    def __contains__(self, address: int) -> bool:
        return address in self._probes

    def __len__(self) -> int:
        return len(self._probes)

    def __iter__(self) -> Iterator[Probe]:
        return iter(sorted(self._probes.values(), key=lambda p: p.address))

    def get(self, address: int) -> Optional[Probe]:
        return self._probes.get(address)

    def handler(self, handler_id: str) -> Optional[Callable]:
        return self._handlers.get(handler_id)

    def attach(self, address: int, kind: str, handler: Callable,
               handler_id: Optional[str] = None) -> Probe:
        if self.program.instr_at(address) is None:
            raise ProbeError(f"no instruction at {address:#x}")
        if address in self._probes:
            raise ProbeConflict(f"probe already attached at {address:#x}")
        if kind == JUMP_OPTIMIZED and not jump_opt_feasible(self.program, address):
            raise OptimizationInfeasible(
                f"jump optimization infeasible at {address:#x}")
        if kind not in (JUMP_OPTIMIZED, BREAKPOINT):
            raise ProbeError(f"unknown probe kind {kind!r}")
        if handler_id is None:
            handler_id = f"h{self._seq}"
            self._seq += 1
        probe = Probe(address=address, kind=kind, handler_id=handler_id)
        self._probes[address] = probe
        self._handlers[handler_id] = handler
        return probe

    def detach(self, address: int) -> Probe:
        probe = self._probes.pop(address, None)
        if probe is None:
            raise ProbeError(f"no probe at {address:#x}")
        self._handlers.pop(probe.handler_id, None)
        return probe

    def snapshot(self) -> tuple:
        return tuple(sorted((p.address, p.kind) for p in self._probes.values()))
