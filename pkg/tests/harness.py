"""Shared test oracles.

The central one is the rebuild oracle: executing a critical span under the
old build with its indirection firing at the new value must leave machine
state bit-identical to executing the rebuilt span (compiled with the new
value) from the same entry state.  The rebuild side never touches the
synthesis path under test: it is an ordinary build plus plain execution.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from sietune import analysis, minicc, seeddiff, synth
from sietune.mvm import (BREAKPOINT, MachineState, TaintTag, ThreadContext,
                         World, isa)
from sietune.symx import derive_expressions

FULL = minicc.ALL_PASSES - {"noise"}


def analyze_one(text: str, cid: str, name: str = "u", passes=FULL, **kw):
    unit = minicc.parse_source(text, name)
    res = analysis.analyze_constant(unit, cid, passes=passes, **kw)
    base = minicc.build(unit, passes=passes)
    return unit, base, res


@dataclass
class RebuildSpan:
    artifact: minicc.BuildArtifact
    start: int
    end: int
    contributors: Tuple[int, ...]


def rebuild_span(unit, cid: str, new_value: int, base_target: tuple,
                 cs_index: int, passes=FULL) -> RebuildSpan:
    """Locate the rebuilt binary's span for one const occurrence."""
    spec = unit.const(cid)
    art = minicc.build(unit, overrides={cid: new_value}, passes=passes)
    other_v = spec.value_v if spec.value_v != new_value else new_value + 1
    other = minicc.build(unit, overrides={cid: other_v}, passes=passes)
    seeds = seeddiff.find_seeds(art, other, cid)
    clusters = seeds.clusters(art)
    cluster = clusters[cs_index]
    exprs = {se.target: se for se in derive_expressions(art, cluster)}
    se = exprs[base_target]
    return RebuildSpan(artifact=art, start=min(se.contributors),
                       end=max(se.contributors), contributors=se.contributors)


def make_entry_state(rng: random.Random, program_entry: int) -> MachineState:
    st = MachineState(pc=program_entry)
    for i in range(14):
        st.regs[i] = rng.getrandbits(64)
    st.regs[14] = rng.getrandbits(64)
    st.regs[15] = 0x100000
    st.flags = [bool(rng.getrandbits(1)) for _ in range(4)]
    for d in range(8):
        st.memory[0x100000 + d] = rng.getrandbits(64)
    return st


def _fn_index(program, addr: int) -> Tuple[str, int]:
    fn = program.function_of(addr)
    instrs = program.function_instructions(fn)
    for i, ins in enumerate(instrs):
        if ins.address == addr:
            return fn, i
    raise AssertionError(f"{addr:#x} not in {fn}")


def _addr_at_index(program, fn: str, idx: int) -> int:
    return program.function_instructions(fn)[idx].address


def _run_until(program, entry: MachineState, start: int, stop: int,
               extra_steps: int, probes=None) -> Tuple[MachineState, List[int]]:
    """Step from ``start`` until the instruction at ``stop`` has executed,
    then ``extra_steps`` more (or until halt)."""
    thread = ThreadContext(thread_id=0, state=entry.copy())
    thread.state.pc = start
    world = World(program, [thread])
    if probes:
        for addr, kind, handler in probes:
            world.probes.attach(addr, kind, handler)
    executed: List[int] = []
    remaining = None
    for _ in range(10_000):
        pc = thread.state.pc
        world.step_thread(thread)
        executed.append(pc)
        if remaining is None:
            if pc == stop:
                remaining = extra_steps
        else:
            remaining -= 1
        if remaining is not None and remaining <= 0:
            break
        if thread.status != "Runnable":
            break
    assert remaining is not None, f"never reached stop {stop:#x}"
    return thread.state, executed


def run_span_with_indirection(base_art, cs, ind, new_v: int,
                              entry: MachineState,
                              extra_steps_after: int = 0) -> Tuple[MachineState, List[int]]:
    """Execute the span under the old build with the indirection firing."""
    program = base_art.program
    start = min(list(ind.locations.values()) + [cs.start])
    tag = TaintTag(cs.const_id, 1)

    def handler_for(role):
        upd = ind.updates[role]

        def handler(ctx):
            synth.execute_update(upd, synth.UpdateContext(ctx, new_v, tag))
        return handler

    probes = [(addr, ind.probe_kinds.get(role) or BREAKPOINT, handler_for(role))
              for role, addr in ind.locations.items()]
    return _run_until(program, entry, start, cs.exit_addr, extra_steps_after,
                      probes)


def run_rebuilt_span(base_art, cs, ind, rb: RebuildSpan, entry: MachineState,
                     extra_steps_after: int = 0) -> Tuple[MachineState, List[int]]:
    """Execute the rebuilt binary over the positionally-aligned span."""
    program = rb.artifact.program
    base_start = min(list(ind.locations.values()) + [cs.start])
    fn, base_start_idx = _fn_index(base_art.program, base_start)
    _, base_cs_start_idx = _fn_index(base_art.program, cs.start)
    lead = base_cs_start_idx - base_start_idx
    _, rb_start_idx = _fn_index(program, rb.start)
    start = _addr_at_index(program, fn, rb_start_idx - lead)

    # the stop point sits the same number of instructions past the span end
    # on both sides; the instructions there are build-identical
    _, base_end_idx = _fn_index(base_art.program, cs.end)
    _, base_stop_idx = _fn_index(base_art.program, cs.exit_addr)
    tail = base_stop_idx - base_end_idx
    _, rb_end_idx = _fn_index(program, rb.end)
    stop = _addr_at_index(program, fn, rb_end_idx + tail)

    return _run_until(program, entry, start, stop, extra_steps_after)


def states_equal(a: MachineState, b: MachineState) -> bool:
    return a.snapshot(with_pc=False, with_taint=False) == \
        b.snapshot(with_pc=False, with_taint=False)


def state_diff(a: MachineState, b: MachineState) -> str:
    out = []
    for i in range(16):
        if a.regs[i] != b.regs[i]:
            out.append(f"r{i}: {a.regs[i]:#x} != {b.regs[i]:#x}")
    if a.flags != b.flags:
        out.append(f"flags: {a.flags} != {b.flags}")
    keys = set(a.memory) | set(b.memory)
    for k in sorted(keys):
        if a.memory.get(k, 0) != b.memory.get(k, 0):
            out.append(f"mem[{k:#x}]: {a.memory.get(k, 0):#x} != {b.memory.get(k, 0):#x}")
    return "; ".join(out) or "equal"


def check_equivalence(unit, base_art, res, cid: str, new_value: int,
                      n_states: int = 50, seed: int = 0, passes=FULL,
                      extra_steps_after: Optional[int] = None) -> int:
    """Rebuild-oracle equivalence over random entry states; returns checks."""
    rng = random.Random(seed)
    checks = 0
    for k, (cs, ind) in enumerate(zip(res.critical_spans, res.indirections)):
        rb = rebuild_span(unit, cid, new_value, cs.target, k, passes=passes)
        extra = extra_steps_after
        if extra is None:
            extra = 2 if ind.case == synth.BRANCH_OPTIMIZED else 0
        for _ in range(n_states):
            entry = make_entry_state(rng, cs.start)
            got, _ = run_span_with_indirection(base_art, cs, ind, new_value,
                                               entry, extra_steps_after=extra)
            want, _ = run_rebuilt_span(base_art, cs, ind, rb, entry,
                                       extra_steps_after=extra)
            assert states_equal(got, want), (
                f"{cid} newV={new_value} case={ind.case}: "
                f"{state_diff(got, want)}")
            checks += 1
    return checks
