"""Mini-VM: instruction semantics, scheduling, probes, taint."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sietune import mvm
from sietune.mvm import isa


def asm(text: str) -> mvm.Program:
    return mvm.parse_asm(text)


STRAIGHT = """
fn main:
0:  MOV r1, #5
5:  MOV r2, #3
10: ADD r1, r2
13: MUL r1, r2
16: SUB r2, #1
20: XOR r3, r3
23: OR  r3, r1
26: SHL r3, #2
30: SHR r3, #1
34: RET
"""


def run_one(program, entry=0, args=(), steps=1000, seed=0, taint_seeds=None):
    t = mvm.make_thread(0, entry, args)
    trace = mvm.run_threads(program, [t], schedule_seed=seed,
                            step_limit=steps, taint_seeds=taint_seeds)
    return t, trace


class TestSemantics:
    def test_mov_immediate(self):
        p = asm("fn main:\n0: MOV r1, #5\n5: RET\n")
        t, _ = run_one(p)
        assert t.state.regs[1] == 5
        # pc advanced by byte_length before the RET froze it
        assert t.state.pc == 5

    def test_cmp_equal_sets_zf(self):
        p = asm("fn main:\n0: MOV r1, #7\n5: CMP r1, #7\n9: RET\n")
        t, _ = run_one(p)
        zf, sf, cf, of = t.state.flags
        assert zf and not sf and not cf and not of

    def test_wraparound(self):
        p = asm("fn main:\n0: MOV r1, #-1\n5: ADD r1, #1\n9: RET\n")
        t, _ = run_one(p)
        assert t.state.regs[1] == 0

    def test_signed_vs_unsigned_jumps(self):
        # -1 < 1 signed, but 0xffff.. > 1 unsigned
        p = asm("""
fn main:
0:  MOV r1, #-1
5:  CMP r1, #1
9:  JL 16
11: MOV r2, #9
16: CMP r1, #1
20: JB 27
22: MOV r3, #1
27: RET
""")
        t, _ = run_one(p)
        assert t.state.regs[2] == 0   # JL taken, MOV r2 skipped
        assert t.state.regs[3] == 1   # JB not taken (no borrow)

    def test_lea_and_memory(self):
        p = asm("""
fn main:
0:  MOV r1, #100
5:  MOV r2, #2
10: LEA r3, [r1+r2*4+1]
14: STORE [r3], r2
19: LOAD r4, [r1+9]
24: RET
""")
        t, _ = run_one(p)
        assert t.state.regs[3] == 109
        assert t.state.regs[4] == 2

    def test_call_ret_and_stack_snapshot(self):
        p = asm("""
fn main:
0:  MOV r0, #4
5:  CALL 20
10: MOV r6, r0
13: RET
fn double:
20: ADD r0, r0
23: RET
""")
        t, _ = run_one(p)
        assert t.state.regs[6] == 8
        t2 = mvm.make_thread(1, 20)
        t2.state.call_stack = [10]
        snap = mvm.stack_snapshot(t2)
        assert snap == [20, 10]

    def test_divergent_control(self):
        # unresolvable static targets are rejected at assembly time
        with pytest.raises(mvm.ProgramError):
            asm("fn main:\n0: JMP 99\n2: RET\n")
        with pytest.raises(mvm.ProgramError):
            asm("fn main:\n0: JMP 1\n2: RET\n")
        # falling off the end of the instruction stream is a runtime error
        p = asm("fn main:\n0: MOV r1, #1\n5: NOP\n6: NOP\n7: RET\n")
        t = mvm.make_thread(0, 0)
        t.state.pc = 6
        t.state.call_stack = []
        p2 = mvm.assemble([("main", p.instructions[:3])])  # drop the RET
        with pytest.raises(mvm.DivergentControl):
            mvm.run_threads(p2, [mvm.make_thread(0, 0)], step_limit=10)

    def test_fig4_style_scale_by_entry(self):
        # doubling then x5 via LEA: eax' = 10 * eax for entry eax = 3
        p = asm("""
fn main:
0: LEA r1, [r1+r1*4]
4: ADD r1, r1
7: RET
""")
        t = mvm.make_thread(0, 0)
        t.state.regs[1] = 3
        mvm.run_threads(p, [t], step_limit=10)
        assert t.state.regs[1] == 30


class TestProgramStructure:
    def test_blocks_partition(self):
        p = asm(STRAIGHT)
        covered = [a for b in p.blocks for a in b.addrs]
        assert sorted(covered) == [i.address for i in p.instructions]
        assert len(set(covered)) == len(covered)

    def test_jump_targets(self):
        p = asm("""
fn main:
0: CMP r1, #0
4: JE 11
6: MOV r2, #1
11: CALL 15
16: RET
fn f:
15: RET
""")
        assert p.jump_targets == frozenset({11, 15, 0})

    def test_render_roundtrip(self):
        p = asm(STRAIGHT)
        p2 = mvm.parse_asm(p.render())
        assert [i.key() for i in p2.instructions] == [i.key() for i in p.instructions]
        assert [i.address for i in p2.instructions] == [i.address for i in p.instructions]


class TestScheduler:
    RACY = """
fn main:
0:  MOV r1, #1
5:  STORE [0x500], r1
10: LOAD r2, [0x500]
15: ADD r1, r2
18: RET
"""

    def test_straight_line_trace_length(self):
        p = asm(STRAIGHT)
        _, trace = run_one(p)
        assert len(trace.steps) == 10

    def test_determinism_same_seed(self):
        p = asm(self.RACY)
        def mk():
            return [mvm.make_thread(0, 0), mvm.make_thread(1, 0)]
        t1 = mvm.run_threads(p, mk(), schedule_seed=7, step_limit=100)
        t2 = mvm.run_threads(p, mk(), schedule_seed=7, step_limit=100)
        assert t1.render() == t2.render()
        assert t1.total_cost == t2.total_cost

    def test_per_thread_projection_stable_across_seeds(self):
        # stores race on a shared word, but control flow is data-independent,
        # so each thread's instruction sequence is schedule-invariant
        p = asm(self.RACY)
        def mk():
            return [mvm.make_thread(0, 0), mvm.make_thread(1, 0)]
        ta = mvm.run_threads(p, mk(), schedule_seed=1, step_limit=100)
        tb = mvm.run_threads(p, mk(), schedule_seed=2, step_limit=100)
        for tid in (0, 1):
            assert ta.per_thread(tid) == tb.per_thread(tid)

    def test_step_limit(self):
        p = asm("fn main:\n0: JMP 0\n")
        with pytest.raises(mvm.StepLimitExceeded):
            run_one(p, steps=10)
        t = mvm.make_thread(0, 0)
        trace = mvm.run_threads(p, [t], step_limit=10, on_limit="stop")
        assert len(trace.steps) == 10

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_cost_accounting(self, seed):
        p = asm(STRAIGHT)
        t = mvm.make_thread(0, 0)
        trace = mvm.run_threads(p, [t], schedule_seed=seed, step_limit=100)
        assert trace.total_cost == len(trace.steps) * mvm.INSTRUCTION_UNIT_COST


class TestProbes:
    def prog(self):
        return asm("""
fn main:
0:  MOV r1, #5
5:  MOV r2, #7
10: ADD r1, r2
13: CMP r1, #12
17: JE 22
19: MOV r3, #1
24: NOP
22: RET
""".replace("19: MOV r3, #1\n24: NOP\n22: RET",
             "19: MOV r3, #1\n24: RET\nfn pad:\n25: RET"))

    def test_attach_jump_optimized_on_long_mov(self):
        p = asm("fn main:\n0: MOV r1, #5\n5: MOV r2, #9\n10: RET\n")
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        probe = w.probes.attach(5, mvm.JUMP_OPTIMIZED, lambda ctx: None)
        assert probe.cost_cycles == 243
        w.run(100)
        assert [f.address for f in w.trace.probe_firings] == [5]

    def test_jump_optimized_rejected_on_jcc(self):
        p = asm("fn main:\n0: CMP r1, #0\n4: JE 7\n6: NOP\n7: RET\n")
        w = mvm.World(p, [])
        with pytest.raises(mvm.OptimizationInfeasible):
            w.probes.attach(4, mvm.JUMP_OPTIMIZED, lambda ctx: None)
        probe = w.probes.attach(4, mvm.BREAKPOINT, lambda ctx: None)
        assert probe.cost_cycles == 1858

    def test_jump_optimized_rejected_on_short_or_target(self):
        p = asm("fn main:\n0: MOV r1, #5\n5: ADD r1, r1\n8: JMP 5\n")
        w = mvm.World(p, [])
        with pytest.raises(mvm.OptimizationInfeasible):
            w.probes.attach(5, mvm.JUMP_OPTIMIZED, lambda ctx: None)  # 3 bytes + target

    def test_probe_conflict(self):
        p = asm("fn main:\n0: MOV r1, #5\n5: RET\n")
        w = mvm.World(p, [])
        w.probes.attach(0, mvm.BREAKPOINT, lambda ctx: None)
        with pytest.raises(mvm.ProbeConflict):
            w.probes.attach(0, mvm.BREAKPOINT, lambda ctx: None)

    def test_attach_detach_transparent(self):
        p = asm(STRAIGHT)
        base_t, base_trace = run_one(p)
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        w.probes.attach(10, mvm.BREAKPOINT, lambda ctx: None)
        w.probes.detach(10)
        w.run(1000)
        assert w.trace.render() == base_trace.render()
        assert w.threads[0].state.snapshot() == base_t.state.snapshot()

    def test_probe_transparency_with_reads(self):
        p = asm(STRAIGHT)
        seen = []
        def handler(ctx):
            seen.append((ctx.read_reg(1), ctx.flags()))
        base_t, _ = run_one(p)
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        w.probes.attach(13, mvm.BREAKPOINT, handler)
        w.run(1000)
        assert seen  # fired
        assert w.threads[0].state.snapshot() == base_t.state.snapshot()

    def test_probe_cost_added(self):
        p = asm(STRAIGHT)
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        w.probes.attach(10, mvm.BREAKPOINT, lambda ctx: None)
        w.run(1000)
        assert w.trace.total_cost == 10 * mvm.INSTRUCTION_UNIT_COST + 1858


class TestWriteState:
    def test_write_inside_handler(self):
        p = asm("fn main:\n0: MOV r1, #5\n5: MOV r2, #1\n10: RET\n")
        def handler(ctx):
            ctx.write_state(("r", 3), 42, mvm.TaintTag("C", 1))
            ctx.write_state(("m", 0x100), 7, mvm.TaintTag("C", 1))
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        w.probes.attach(5, mvm.JUMP_OPTIMIZED, handler)
        w.run(100)
        st = w.threads[0].state
        assert st.regs[3] == 42
        assert st.read_mem(0x100) == 7
        assert st.reg_taint[3] == frozenset({mvm.TaintTag("C", 1)})
        assert st.mem_taint[0x100] == frozenset({mvm.TaintTag("C", 1)})

    def test_write_outside_handler_illegal(self):
        p = asm("fn main:\n0: RET\n")
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        with pytest.raises(mvm.IllegalContext):
            w.write_state(w.threads[0], ("r", 1), 1)

    def test_handler_writes_only_target(self):
        p = asm(STRAIGHT)
        base_t, _ = run_one(p)
        def handler(ctx):
            ctx.write_state(("r", 9), 1234)
        w = mvm.World(p, [mvm.make_thread(0, 0)])
        w.probes.attach(16, mvm.BREAKPOINT, handler)
        w.run(1000)
        got = w.threads[0].state
        for i in range(16):
            if i != 9:
                assert got.regs[i] == base_t.state.regs[i]
        assert got.flags == base_t.state.flags
        assert got.regs[9] == 1234


class TestTaint:
    def test_seed_and_propagation(self):
        p = asm("""
fn main:
0:  MOV r1, #5
5:  MOV r2, #3
10: ADD r2, r1
13: MOV r3, r2
16: MOV r2, #0
21: RET
""")
        t, trace = run_one(p, taint_seeds={0: "C"})
        tag = mvm.TaintTag("C", 0)
        st = t.state
        assert st.reg_taint[1] == frozenset({tag})
        assert st.reg_taint[3] == frozenset({tag})        # propagated via r2
        assert st.reg_taint[2] == frozenset()             # untainted overwrite clears
        consumed_pcs = [e.address for e in trace.taint_events]
        assert consumed_pcs == [10, 13]

    def test_taint_through_memory_and_flags(self):
        p = asm("""
fn main:
0:  MOV r1, #9
5:  STORE [0x40], r1
10: LOAD r2, [0x40]
15: CMP r2, #1
19: JG 23
21: MOV r4, #1
23: RET
""" .replace("21: MOV r4, #1\n23: RET", "21: NOP\n22: NOP\n23: RET"))
        t, trace = run_one(p, taint_seeds={0: "K"})
        tag = mvm.TaintTag("K", 0)
        assert t.state.mem_taint[0x40] == frozenset({tag})
        assert t.state.reg_taint[2] == frozenset({tag})
        # the conditional jump consumed tainted flags
        jcc_events = [e for e in trace.taint_events if e.opcode == "JG"]
        assert jcc_events and jcc_events[0].consumed == frozenset({tag})

    def test_brute_force_soundness_small_program(self):
        # recompute data dependence by brute force and compare with tags
        p = asm("""
fn main:
0:  MOV r1, #5
5:  MOV r2, #2
10: MUL r2, r1
13: MOV r4, r2
16: XOR r5, r5
19: ADD r5, r4
22: SUB r4, r2
25: RET
""")
        t, _ = run_one(p, taint_seeds={0: "C"})
        # dependence closure on register dataflow: r1 -> r2 -> r4 -> r5
        tainted = {1, 2, 4, 5}
        for i in range(16):
            expected = frozenset({mvm.TaintTag("C", 0)}) if i in tainted else frozenset()
            assert t.state.reg_taint[i] == expected, f"r{i}"


@settings(max_examples=50, deadline=None)
@given(a=st.integers(-2**63, 2**63 - 1), b=st.integers(-2**63, 2**63 - 1))
def test_compare_flags_match_python_semantics(a, b):
    zf, sf, cf, of = isa.compare_flags(a, b)
    assert zf == ((a - b) % 2**64 == 0)
    assert cf == ((a % 2**64) < (b % 2**64))
    # signed less-than is SF != OF
    assert (isa.to_s64(a) < isa.to_s64(b)) == (sf != of)
