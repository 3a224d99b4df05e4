"""Indirection synthesis, probe planning, and the rebuild-equivalence oracle."""

from __future__ import annotations

import random

import pytest

import harness
from sietune import minicc, mvm, synth
from sietune.mvm import probes as P

FIG4 = """
unit fig4
fn main(x):
    result = x * (2 * @perfconst(id=SCALE2X, cat=ScalingFactor) 5)
    return result
"""

CASE_A = """
unit casea
fn main(x):
    t = x * @perfconst(id=SCALE, cat=ScalingFactor) 5
    keep = x + t
    return keep
"""

CASE_B = """
unit caseb
fn main(x):
    budget = x
    budget += @perfconst(id=BATCH_ADD, cat=BatchSize) 128
    z = budget ^ 3
    return z
"""

CASE_B_ODD_MUL = """
unit casebm
fn main(x):
    rate = x
    rate *= @perfconst(id=RATE_X3, cat=ScalingFactor) 3
    out = rate + 1
    return out
"""

CASE_C = """
unit casec
fn main(x):
    acc = x
    acc *= @perfconst(id=EWMA_W, cat=ScalingFactor) 6
    acc &= 255
    y = acc + 1
    return y
"""

BRANCH = """
unit branch
global PAD1
global PAD2
global PAD3
fn main(x):
    r = x & 65535
    store [PAD1], 1234567
    if r > @perfconst(id=RESTART_LIMIT, cat=Threshold) 7 goto high
    store [PAD2], 2345678
    low = r + 1
    return low
high:
    store [PAD3], 3456789
    store [PAD3], 4567890
    hi2 = r + 2
    return hi2
"""

BRANCH_FALLBACK = """
unit bfall
fn main(x):
    r = x & 255
    if r > @perfconst(id=SOFT_CAP, cat=Threshold) 12 goto big
    return 1
big:
    return 2
"""


class TestCaseSelection:
    def test_case_a_live_inputs(self):
        _, _, res = harness.analyze_one(CASE_A, "SCALE", "casea")
        assert res.indirections[0].case == synth.NO_OVERWRITE

    def test_case_b_reversible_add(self):
        _, _, res = harness.analyze_one(CASE_B, "BATCH_ADD", "caseb")
        assert res.indirections[0].case == synth.REVERSIBLE

    def test_case_b_odd_multiplier_inverts(self):
        _, _, res = harness.analyze_one(CASE_B_ODD_MUL, "RATE_X3", "casebm")
        assert res.indirections[0].case == synth.REVERSIBLE

    def test_case_c_irreversible(self):
        _, _, res = harness.analyze_one(CASE_C, "EWMA_W", "casec")
        ind = res.indirections[0]
        assert ind.case == synth.DUAL_LOCATION
        assert set(ind.locations) == {synth.CAPTURE_BEFORE, synth.RESTORE_AFTER}
        assert ind.locations[synth.CAPTURE_BEFORE] == res.critical_spans[0].start

    def test_fig4_even_multiplier_is_dual(self):
        _, _, res = harness.analyze_one(FIG4, "SCALE2X", "fig4", magic=(10, 17))
        assert res.indirections[0].case == synth.DUAL_LOCATION

    def test_branch_rewrite(self):
        _, base, res = harness.analyze_one(BRANCH, "RESTART_LIMIT", "branch")
        ind = res.indirections[0]
        assert ind.case == synth.BRANCH_OPTIMIZED
        assert set(ind.locations) == {synth.PRIMARY, synth.FALL_THROUGH_RESTORE,
                                      synth.BRANCH_TARGET_RESTORE}
        assert all(k == P.JUMP_OPTIMIZED for k in ind.probe_kinds.values())

    def test_branch_fallback_single_breakpoint(self):
        _, base, res = harness.analyze_one(BRANCH_FALLBACK, "SOFT_CAP", "bfall")
        ind = res.indirections[0]
        assert ind.case == synth.NO_OVERWRITE
        assert list(ind.probe_kinds.values()) == [P.BREAKPOINT]
        jcc = base.program.instr_at(ind.locations[synth.PRIMARY])
        assert jcc.opcode in mvm.isa.CONDITIONAL_JUMPS

    def test_branch_opt_disabled_flag(self):
        _, _, res = harness.analyze_one(BRANCH, "RESTART_LIMIT", "branch",
                                        allow_branch_opt=False)
        assert res.indirections[0].case == synth.NO_OVERWRITE


class TestCostModel:
    def test_branch_plan_cheaper_than_breakpoint(self):
        _, _, res = harness.analyze_one(BRANCH, "RESTART_LIMIT", "branch")
        ind = res.indirections[0]
        assert ind.case == synth.BRANCH_OPTIMIZED
        assert 2 * 243 <= ind.modeled_cost() <= 3 * (243 + 20)
        assert ind.modeled_cost() < P.BREAKPOINT_CYCLES

    def test_probe_constants(self):
        assert P.JUMP_OPTIMIZED_CYCLES == 243
        assert P.BREAKPOINT_CYCLES == 1858
        assert P.UPDATE_CYCLES == 20


class TestEquivalence:
    # scaling multipliers of 0/1 fold the const out of the binary entirely,
    # which leaves the rebuild oracle nothing to anchor on; stay above 1
    NEW_VALUES = (2, 3, 9, 31, 200)

    @pytest.mark.parametrize("text,cid,name", [
        (CASE_A, "SCALE", "casea"),
        (CASE_B, "BATCH_ADD", "caseb"),
        (CASE_B_ODD_MUL, "RATE_X3", "casebm"),
        (CASE_C, "EWMA_W", "casec"),
        (FIG4, "SCALE2X", "fig4"),
    ])
    def test_rebuild_equivalence_random_states(self, text, cid, name):
        unit, base, res = harness.analyze_one(text, cid, name)
        assert res.tunable, res.reason
        for v in self.NEW_VALUES:
            harness.check_equivalence(unit, base, res, cid, v, n_states=40,
                                      seed=hash((cid, v)) & 0xFFFF)

    def test_branch_equivalence(self):
        unit, base, res = harness.analyze_one(BRANCH, "RESTART_LIMIT", "branch")
        for v in (1, 4, 100, 40000):
            harness.check_equivalence(unit, base, res, "RESTART_LIMIT", v,
                                      n_states=40, seed=v)

    def test_branch_outcome_identity_full_16bit_domain(self):
        # the 7 -> 4 threshold change equals adding 3 before the compare,
        # over the whole 16-bit domain of the compared register
        unit, base, res = harness.analyze_one(BRANCH, "RESTART_LIMIT", "branch")
        (cs,) = res.critical_spans
        (ind,) = res.indirections
        assert ind.case == synth.BRANCH_OPTIMIZED
        rb = harness.rebuild_span(unit, "RESTART_LIMIT", 4, cs.target, 0)
        rng = random.Random(0)
        for x in range(0, 1 << 16):
            entry = harness.make_entry_state(rng, cs.start)
            entry.regs[0] = x   # feeds r = x & 65535
            got, _ = harness.run_span_with_indirection(
                base, cs, ind, 4, entry, extra_steps_after=2)
            want, _ = harness.run_rebuilt_span(
                base, cs, ind, rb, entry, extra_steps_after=2)
            assert harness.states_equal(got, want), \
                f"x={x}: {harness.state_diff(got, want)}"

    def test_case_c_exhaustive_8bit_and_scratch_hygiene(self):
        unit, base, res = harness.analyze_one(CASE_C, "EWMA_W", "casec")
        (cs,) = res.critical_spans
        (ind,) = res.indirections
        rb = harness.rebuild_span(unit, "EWMA_W", 9, cs.target, 0)
        rng = random.Random(1)
        base_entry = harness.make_entry_state(rng, cs.start)
        for x in range(256):
            entry = base_entry.copy()
            entry.regs[7] = x    # the accumulated register
            got, _ = harness.run_span_with_indirection(base, cs, ind, 9, entry)
            want, _ = harness.run_rebuilt_span(base, cs, ind, rb, entry)
            assert harness.states_equal(got, want), harness.state_diff(got, want)
            # scratch hygiene: apart from the target and its downstream
            # consumer at the exit instruction, state equals a probe-free run
            free = entry.copy()
            mvm.execute_span(base.program, free, cs.start, cs.exit_addr)
            consumer_dst = base.program.instr_at(cs.exit_addr).reg_written()
            for i in range(16):
                if ("r", i) != cs.target and i != consumer_dst:
                    assert got.regs[i] == free.regs[i], f"r{i}"
            assert got.flags == free.flags
            assert got.memory == free.memory

    def test_identity_value_noop(self):
        # x_set with the compiled value must reproduce the old-value run
        unit, base, res = harness.analyze_one(CASE_A, "SCALE", "casea")
        (cs,) = res.critical_spans
        (ind,) = res.indirections
        rng = random.Random(5)
        for _ in range(20):
            entry = harness.make_entry_state(rng, cs.start)
            got, _ = harness.run_span_with_indirection(base, cs, ind, 5, entry)
            free = entry.copy()
            mvm.execute_span(base.program, free, cs.start, cs.exit_addr)
            assert got.snapshot(with_pc=False, with_taint=False) == \
                free.snapshot(with_pc=False, with_taint=False)


class TestUpdatePrograms:
    def test_micro_ops_render(self):
        _, _, res = harness.analyze_one(CASE_C, "EWMA_W", "casec")
        lines = res.indirections[0].render()
        text = "\n".join(lines)
        assert "scratch[" in text and "newV" in text

    def test_nonintegral_map_rejected(self):
        from fractions import Fraction
        from sietune.symx.fit import LinearMap
        _, base, res = harness.analyze_one(CASE_A, "SCALE", "casea")
        cs = res.critical_spans[0]
        cs.linear_map = LinearMap(Fraction(1, 2), Fraction(0))
        with pytest.raises(synth.NonIntegralMap):
            synth.synthesize(cs, base)
