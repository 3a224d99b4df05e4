"""Forward thin slicing over the whole program, by abstract interpretation.

The slice follows data dependence only: register def-use, frame-slot
stores and loads (address-precise through the stack pointer and tracked
frame pointers), return values into callers, and writes through
pointer-style arguments.  Control dependence is deliberately out.

The analysis walks the program from ``main`` with one abstract activation
per call path (bounded depth).  Taint is injected at the seed instruction
addresses; every instruction that reads a tainted register, slot, or the
flag word becomes a slice member.  A tainted value reaching a global cell
or an unresolvable address aborts the analysis: the dependence escapes
the scope a safe span can confine.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from ..minicc.build import BuildArtifact
from ..minicc.codegen import GLOBAL_BASE
from ..mvm import isa
from ..mvm.program import Program

_MAX_DEPTH = 12
_GLOBAL_LIMIT = GLOBAL_BASE + 0x10000


class EscapedDependence(Exception):
    """Const-derived data flows beyond what a safe span can confine."""


@dataclass(frozen=True)
class AbsVal:
    taint: bool = False
    ptr: Optional[tuple] = None   # ('frame', iid, disp) | ('global', addr)

    def join(self, other: "AbsVal") -> "AbsVal":
        ptr = self.ptr if self.ptr == other.ptr else None
        return AbsVal(self.taint or other.taint, ptr)


_UNTAINTED = AbsVal()


def _is_global(addr: int) -> bool:
    return GLOBAL_BASE <= addr < _GLOBAL_LIMIT


@dataclass
class _State:
    regs: Tuple[AbsVal, ...]
    flags_taint: bool = False

    def get(self, i: int) -> AbsVal:
        return self.regs[i]

    def set(self, i: int, v: AbsVal) -> "_State":
        regs = list(self.regs)
        regs[i] = v
        return _State(tuple(regs), self.flags_taint)

    def join(self, other: "_State") -> "_State":
        return _State(tuple(a.join(b) for a, b in zip(self.regs, other.regs)),
                      self.flags_taint or other.flags_taint)


def _entry_state() -> _State:
    return _State(tuple(_UNTAINTED for _ in range(16)))


class Slicer:
    def __init__(self, program: Program, seed_addrs: FrozenSet[int],
                 entry_fn: str = "main"):
        self.program = program
        self.seeds = seed_addrs
        self.entry_fn = entry_fn
        self.members: Set[Tuple[str, int]] = set()
        self.frame_mem: Dict[Tuple[tuple, int], AbsVal] = {}
        self.ret_val: Dict[tuple, AbsVal] = {}
        self._changed = True
        self._active: List[tuple] = []

    def run(self) -> Set[Tuple[str, int]]:
        rounds = 0
        while self._changed:
            self._changed = False
            rounds += 1
            if rounds > 64:
                raise EscapedDependence("slice analysis failed to stabilize")
            self._analyze_fn(self.entry_fn, (self.entry_fn,), _entry_state())
        return set(self.members)

    # -- per-activation dataflow -------------------------------------------

    def _analyze_fn(self, fn_name: str, iid: tuple, entry: _State) -> AbsVal:
        if len(iid) > _MAX_DEPTH:
            raise EscapedDependence(f"call depth beyond {_MAX_DEPTH} at {fn_name}")
        fn = self.program.function(fn_name)
        block_in: Dict[int, _State] = {fn.entry: entry}
        worklist = [fn.entry]
        ret = _UNTAINTED
        guard = 0
        while worklist:
            guard += 1
            if guard > 10_000:
                raise EscapedDependence("intra-function dataflow diverged")
            start = worklist.pop(0)
            block = self.program.block_of(start)
            st = block_in[start]
            for addr in block.addrs:
                ins = self.program.instr_at(addr)
                st, ret_here = self._transfer(fn_name, iid, ins, st)
                if ret_here is not None:
                    ret = ret.join(ret_here)
            for succ in block.succs:
                prev = block_in.get(succ)
                nxt = st if prev is None else prev.join(st)
                if prev is None or nxt != prev:
                    block_in[succ] = nxt
                    if succ not in worklist:
                        worklist.append(succ)
        prev_ret = self.ret_val.get(iid, _UNTAINTED)
        joined = prev_ret.join(ret)
        if joined != prev_ret:
            self.ret_val[iid] = joined
            self._changed = True
        return joined

    def _member(self, fn: str, addr: int):
        if (fn, addr) not in self.members:
            self.members.add((fn, addr))
            self._changed = True

    def _slot(self, iid: tuple, disp: int) -> AbsVal:
        return self.frame_mem.get((iid, disp), _UNTAINTED)

    def _store_slot(self, iid: tuple, disp: int, v: AbsVal):
        key = (iid, disp)
        prev = self.frame_mem.get(key, _UNTAINTED)
        nxt = prev.join(v) if prev.taint or prev.ptr else v
        # taint is monotone across the fixpoint; untainted overwrites do not
        # retract it (safe over-approximation for confinement)
        if prev.taint and not nxt.taint:
            nxt = replace(nxt, taint=True)
        if nxt != prev:
            self.frame_mem[key] = nxt
            self._changed = True

    def _resolve(self, iid: tuple, st: _State, op: tuple,
                 ins) -> Tuple[Optional[tuple], bool]:
        """Memory operand -> (location, address_tainted).

        Locations: ('frame', iid, disp) | ('global', addr) | None (unknown).
        """
        _, base, index, scale, disp = op
        addr_taint = False
        if index is not None:
            addr_taint = st.get(index).taint or (base is not None
                                                 and st.get(base).taint)
            return None, addr_taint
        if base is None:
            if _is_global(disp):
                return ("global", disp), False
            return None, False
        bv = st.get(base)
        addr_taint = bv.taint
        if base == 15:
            return ("frame", iid, disp), addr_taint
        if bv.ptr is not None:
            kind = bv.ptr[0]
            if kind == "frame":
                return ("frame", bv.ptr[1], bv.ptr[2] + disp), addr_taint
            return ("global", bv.ptr[1] + disp), addr_taint
        return None, addr_taint

    def _read_loc(self, loc: Optional[tuple], fn: str, ins) -> AbsVal:
        if loc is None:
            return _UNTAINTED   # tainted stores to unknown locations abort
        if loc[0] == "frame":
            return self._slot(loc[1], loc[2])
        return _UNTAINTED       # globals: tainted global stores abort first

    def _transfer(self, fn: str, iid: tuple, ins, st: _State
                  ) -> Tuple[_State, Optional[AbsVal]]:
        op = ins.opcode
        ops = ins.operands
        addr = ins.address
        seeded = addr in self.seeds
        consumed = False

        def reads(v: AbsVal) -> AbsVal:
            nonlocal consumed
            if v.taint:
                consumed = True
            return v

        def src_val(operand) -> AbsVal:
            if isa.is_reg(operand):
                return reads(st.get(operand[1]))
            if isa.is_imm(operand):
                ptr = ("global", operand[1]) if _is_global(operand[1]) else None
                return AbsVal(False, ptr)
            loc, ataint = self._resolve(iid, st, operand, ins)
            if ataint:
                raise EscapedDependence(
                    f"{fn}@{addr:#x}: tainted address in {ins.render()}")
            return reads(self._read_loc(loc, fn, ins))

        ret: Optional[AbsVal] = None
        if op in (isa.MOV, isa.LOAD):
            v = src_val(ops[1])
            if seeded:
                v = replace(v, taint=True)
            st = st.set(ops[0][1], v)
        elif op == isa.LEA:
            _, base, index, scale, disp = ops[1]
            taint = False
            ptr = None
            if base is not None:
                bv = reads(st.get(base))
                taint |= bv.taint
                if base == 15:
                    ptr = ("frame", iid, disp)
                elif bv.ptr is not None and index is None:
                    ptr = (bv.ptr[0], bv.ptr[1], bv.ptr[2] + disp) \
                        if bv.ptr[0] == "frame" else ("global", bv.ptr[1] + disp)
            if index is not None:
                taint |= reads(st.get(index)).taint
                ptr = None
            st = st.set(ops[0][1], AbsVal(taint or seeded, ptr))
        elif op == isa.STORE:
            v = src_val(ops[1])
            if seeded:
                v = replace(v, taint=True)
            loc, ataint = self._resolve(iid, st, ops[0], ins)
            if ataint:
                raise EscapedDependence(
                    f"{fn}@{addr:#x}: tainted store address")
            if loc is None:
                if v.taint:
                    raise EscapedDependence(
                        f"{fn}@{addr:#x}: tainted store to unresolved address")
            elif loc[0] == "global":
                if v.taint:
                    raise EscapedDependence(
                        f"{fn}@{addr:#x}: tainted store to global cell "
                        f"{loc[1]:#x}")
            else:
                self._store_slot(loc[1], loc[2], v)
        elif op in isa.ALU_OPS:
            dst = ops[0][1]
            a = reads(st.get(dst))
            b = src_val(ops[1])
            taint = a.taint or b.taint or seeded
            ptr = None
            if op == isa.ADD and a.ptr is not None and isa.is_imm(ops[1]):
                ptr = (a.ptr[0], a.ptr[1], a.ptr[2] + ops[1][1]) \
                    if a.ptr[0] == "frame" else ("global", a.ptr[1] + ops[1][1])
            st = st.set(dst, AbsVal(taint, ptr))
        elif op == isa.NEG:
            a = reads(st.get(ops[0][1]))
            st = st.set(ops[0][1], AbsVal(a.taint or seeded, None))
        elif op == isa.CMP:
            a = src_val(ops[0])
            b = src_val(ops[1])
            st = _State(st.regs, a.taint or b.taint or seeded)
        elif op in isa.CONDITIONAL_JUMPS:
            if st.flags_taint:
                consumed = True
        elif op == isa.CALL:
            target = ops[0][1]
            callee = self.program.function_of(target)
            callee_iid = iid + (addr,)
            callee_entry = _State(st.regs, False)
            if any(st.get(i).taint for i in range(6)):
                consumed = True   # handing tainted arguments across the call
            ret_v = self._analyze_fn(callee, callee_iid, callee_entry)
            regs = list(st.regs)
            regs[0] = ret_v
            for i in range(1, 6):
                regs[i] = _UNTAINTED
            regs[14] = _UNTAINTED
            st = _State(tuple(regs), st.flags_taint)
        elif op == isa.RET:
            ret = st.get(0)
            if ret.taint:
                consumed = True
        elif op in (isa.JMP, isa.NOP):
            pass
        else:
            raise EscapedDependence(f"unhandled opcode {op} in slice")

        if consumed or seeded:
            self._member(fn, addr)
        return st, ret
