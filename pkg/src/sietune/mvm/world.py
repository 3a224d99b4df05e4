"""Scheduler, execution traces, and the probe-handler context.

A World runs simulated threads over one Program: each quantum, a seeded
PRNG picks one runnable thread uniformly and it executes one instruction
(any probe at its pc fires first, pre-handler style).  The simulator
itself is single-threaded; everything here is deterministic in
(program, initial thread states, probes, seed).

Cost accounting: one unit per instruction, plus each fired probe's cycle
cost, plus a fixed charge per executed indirection update (charged via
``World.charge_update``).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Tuple

from . import isa
from .machine import (HALTED, RUNNABLE, ExecEvent, InvalidAddress, MachineState,
                      MvmError, TaintTag, ThreadContext, execute_instruction,
                      stack_snapshot)
from .probes import (INSTRUCTION_UNIT_COST, UPDATE_CYCLES, Probe, ProbeSet)
from .program import Program


class StepLimitExceeded(MvmError):
    pass


class IllegalContext(MvmError):
    pass


@dataclass
class StepRecord:
    quantum: int
    thread_id: int
    address: int
    opcode: str
    consumed: FrozenSet[TaintTag]


@dataclass
class ProbeFiring:
    quantum: int
    thread_id: int
    address: int
    kind: str


@dataclass
class Trace:
    steps: List[StepRecord] = field(default_factory=list)
    probe_firings: List[ProbeFiring] = field(default_factory=list)
    taint_events: List[StepRecord] = field(default_factory=list)
    total_cost: int = 0

    def per_thread(self, thread_id: int) -> List[Tuple[int, str]]:
        return [(s.address, s.opcode) for s in self.steps if s.thread_id == thread_id]

    def render(self) -> str:
        lines = []
        for s in self.steps:
            line = f"T{s.thread_id} {s.address:#06x} {s.opcode}"
            if s.consumed:
                tags = ",".join(sorted(t.render() for t in s.consumed))
                line += f" taint:{tags}"
            lines.append(line)
        return "\n".join(lines) + ("\n" if lines else "")


class ProbeContext:
    """What a probe handler may see and do.

    Handlers read thread state freely; writes go through ``write_state``,
    which is only legal while a handler is running.
    """

    def __init__(self, world: "World", thread: ThreadContext, probe: Probe):
        self.world = world
        self.thread = thread
        self.probe = probe
        self.quantum = world.quantum

    def read_reg(self, i: int) -> int:
        return self.thread.state.regs[i]

    def read_mem(self, addr: int) -> int:
        return self.thread.state.read_mem(addr)

    def flags(self) -> Tuple[bool, bool, bool, bool]:
        return tuple(self.thread.state.flags)

    def stack_snapshot(self) -> List[int]:
        return stack_snapshot(self.thread)

    def write_state(self, target: tuple, value, tag=None):
        self.world.write_state(self.thread, target, value, tag)


class World:
    """One program, its threads, probes, and the seeded scheduler."""

    def __init__(self, program: Program, threads: Iterable[ThreadContext] = (),
                 schedule_seed: int = 0,
                 taint_seeds: Optional[Dict[int, str]] = None):
        self.program = program
        self.threads: Dict[int, ThreadContext] = {}
        for t in threads:
            self.add_thread(t)
        self.probes = ProbeSet(program)
        self.rng = random.Random(schedule_seed)
        self.taint_seeds: Dict[int, str] = dict(taint_seeds or {})
        self.quantum = 0
        self.trace = Trace()
        self.update_executions = 0
        self._in_handler = False
        self._pending_detach: List[int] = []
        self.quantum_hooks: List[Callable[["World"], None]] = []

    def add_thread(self, thread: ThreadContext):
        if thread.thread_id in self.threads:
            raise MvmError(f"duplicate thread id {thread.thread_id}")
        self.threads[thread.thread_id] = thread

    def runnable(self) -> List[int]:
        return sorted(tid for tid, t in self.threads.items() if t.status == RUNNABLE)

    # -- handler-side state writes ------------------------------------------

    def write_state(self, thread: ThreadContext, target: tuple, value,
                    tag=None):
        """Write a register, memory word, or the flag word from a handler.

        ``tag`` is a TaintTag to stamp, None to clear, or "preserve" to keep
        the destination's current tags.
        """
        if not self._in_handler:
            raise IllegalContext("write_state is only legal inside a probe handler")
        st = thread.state
        kind = target[0]
        if kind == "r":
            idx = target[1]
            st.regs[idx] = value & isa.WORD_MASK
            if tag != "preserve":
                st.reg_taint[idx] = frozenset({tag}) if tag else frozenset()
        elif kind == "m":
            addr = target[1]
            st.write_mem(addr, value)
            if tag != "preserve":
                if tag:
                    st.mem_taint[addr] = frozenset({tag})
                else:
                    st.mem_taint.pop(addr, None)
        elif kind == "flags":
            st.flags = list(value)
            if tag != "preserve":
                st.flag_taint = frozenset({tag}) if tag else frozenset()
        else:
            raise MvmError(f"bad write_state target {target!r}")

    def charge_update(self):
        """Account one executed indirection update."""
        self.update_executions += 1
        self.trace.total_cost += UPDATE_CYCLES

    def detach_after_step(self, address: int):
        """Queue a probe detach to apply once the current step completes."""
        self._pending_detach.append(address)

    # -- stepping -------------------------------------------------------------

    def step_thread(self, thread: ThreadContext) -> ExecEvent:
        """Fire any probe at pc, then execute the instruction there."""
        if thread.status != RUNNABLE:
            raise MvmError(f"thread {thread.thread_id} is not runnable")
        pc = thread.state.pc
        ins = self.program.instr_at(pc)
        if ins is None:
            raise InvalidAddress(f"pc {pc:#x} is not an instruction")

        probe = self.probes.get(pc)
        if probe is not None:
            self.trace.probe_firings.append(
                ProbeFiring(self.quantum, thread.thread_id, pc, probe.kind))
            self.trace.total_cost += probe.cost_cycles
            handler = self.probes.handler(probe.handler_id)
            if handler is not None:
                self._in_handler = True
                try:
                    handler(ProbeContext(self, thread, probe))
                finally:
                    self._in_handler = False

        ev = execute_instruction(self.program, thread.state, ins, self.taint_seeds)
        self.trace.total_cost += INSTRUCTION_UNIT_COST
        rec = StepRecord(self.quantum, thread.thread_id, pc, ins.opcode, ev.consumed)
        self.trace.steps.append(rec)
        if ev.consumed:
            self.trace.taint_events.append(rec)
        if ev.halted:
            thread.status = HALTED

        for addr in self._pending_detach:
            if addr in self.probes:
                self.probes.detach(addr)
        self._pending_detach.clear()
        return ev

    def run(self, step_limit: int, on_limit: str = "raise") -> Trace:
        """Run until all threads halt or the step limit is reached.

        ``on_limit`` is "raise" (StepLimitExceeded, per the contract) or
        "stop" (return the partial trace; used by the CLI's bounded runs).
        """
        if step_limit <= 0:
            raise ValueError("step_limit must be positive")
        steps = 0
        while True:
            runnable = self.runnable()
            if not runnable:
                return self.trace
            if steps >= step_limit:
                if on_limit == "stop":
                    return self.trace
                raise StepLimitExceeded(f"step limit {step_limit} reached")
            tid = runnable[self.rng.randrange(len(runnable))]
            self.step_thread(self.threads[tid])
            steps += 1
            self.quantum += 1
            for hook in self.quantum_hooks:
                hook(self)


class ProbeRouter:
    """Fans multiple logical handlers into the one-probe-per-address rule.

    The first registration at an address attaches the real probe (with the
    requested kind, or the best feasible one); later registrations chain
    onto it in registration order.  Removing the last handler detaches the
    probe, deferred to the end of the current step when called from inside
    a handler.
    """

    def __init__(self, world: "World"):
        self.world = world
        self._handlers: Dict[int, List[Tuple[int, Callable]]] = {}
        self._seq = 0

    def add(self, address: int, callback: Callable,
            kind: Optional[str] = None) -> Tuple[int, int]:
        from .probes import BREAKPOINT, JUMP_OPTIMIZED, jump_opt_feasible
        if address not in self._handlers:
            if kind is None:
                kind = (JUMP_OPTIMIZED
                        if jump_opt_feasible(self.world.program, address)
                        else BREAKPOINT)
            self._handlers[address] = []
            self.world.probes.attach(address, kind, self._dispatcher(address))
        self._seq += 1
        self._handlers[address].append((self._seq, callback))
        return (address, self._seq)

    def remove(self, key: Tuple[int, int]):
        address, seq = key
        entries = self._handlers.get(address)
        if not entries:
            return
        self._handlers[address] = [e for e in entries if e[0] != seq]
        if not self._handlers[address]:
            del self._handlers[address]
            self.world.detach_after_step(address)

    def _dispatcher(self, address: int) -> Callable:
        def dispatch(ctx):
            for _, cb in list(self._handlers.get(address, ())):
                cb(ctx)
        return dispatch

    def snapshot(self) -> tuple:
        return tuple(sorted((a, len(v)) for a, v in self._handlers.items()))


def run_threads(program: Program, threads: Iterable[ThreadContext],
                probes_setup: Optional[Callable[[World], None]] = None,
                schedule_seed: int = 0, step_limit: int = 10_000,
                taint_seeds: Optional[Dict[int, str]] = None,
                on_limit: str = "raise") -> Trace:
    """Convenience wrapper: build a World, optionally attach probes, run."""
    world = World(program, threads, schedule_seed, taint_seeds)
    if probes_setup is not None:
        probes_setup(world)
    return world.run(step_limit, on_limit=on_limit)


def execute_span(program: Program, state: MachineState, start: int,
                 last: int, max_steps: int = 10_000,
                 taint_seeds: Optional[Dict[int, str]] = None) -> MachineState:
    """Execute from ``start`` until the instruction at ``last`` has executed.

    Follows control flow (so a span ending in a conditional jump lands on
    the taken successor).  Mutates and returns ``state``.  No probes fire.
    """
    state.pc = start
    for _ in range(max_steps):
        ins = program.instr_at(state.pc)
        if ins is None:
            raise InvalidAddress(f"pc {state.pc:#x} is not an instruction")
        addr = ins.address
        execute_instruction(program, state, ins, taint_seeds)
        if addr == last:
            return state
    raise StepLimitExceeded(f"span [{start:#x}..{last:#x}] did not complete")
