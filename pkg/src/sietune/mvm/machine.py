"""Machine state and single-instruction semantics, with version taint.

All arithmetic is 64-bit two's-complement with silent wrap-around.  Flags
are written only by CMP (as the arithmetic result of the subtraction) and
read only by conditional jumps; data ops leave them alone.  Shift counts
are taken modulo 64.

Taint: a value derived from a perf-const materialization carries a set of
``TaintTag(const_id, version)`` tags.  Any data-producing op whose inputs
carry tags propagates their union to the destination; overwriting with a
fully untainted value clears the destination.  Instructions listed in a
``taint_seeds`` map additionally stamp their destination with version-0
tags for the given const (the compiled-in value is, by definition, the
original version).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

from . import isa
from .isa import Instruction, WORD_MASK
from .program import Program


class MvmError(Exception):
    pass


class InvalidAddress(MvmError):
    pass


class DivergentControl(MvmError):
    pass


@dataclass(frozen=True)
class TaintTag:
    const_id: str
    version: int

    def render(self) -> str:
        return f"{self.const_id}@v{self.version}"


EMPTY_TAGS: FrozenSet[TaintTag] = frozenset()

RUNNABLE = "Runnable"
HALTED = "Halted"


class MachineState:
    """Registers, flags, sparse word memory, call stack, and taint maps."""

    __slots__ = ("regs", "flags", "memory", "pc", "call_stack",
                 "reg_taint", "mem_taint", "flag_taint")

    def __init__(self, pc: int = 0):
        self.regs: List[int] = [0] * isa.NUM_REGS
        self.flags: List[bool] = [False, False, False, False]
        self.memory: Dict[int, int] = {}
        self.pc: int = pc
        self.call_stack: List[int] = []
        self.reg_taint: List[FrozenSet[TaintTag]] = [EMPTY_TAGS] * isa.NUM_REGS
        self.mem_taint: Dict[int, FrozenSet[TaintTag]] = {}
        self.flag_taint: FrozenSet[TaintTag] = EMPTY_TAGS

    def copy(self) -> "MachineState":
        st = MachineState(self.pc)
        st.regs = list(self.regs)
        st.flags = list(self.flags)
        st.memory = dict(self.memory)
        st.call_stack = list(self.call_stack)
        st.reg_taint = list(self.reg_taint)
        st.mem_taint = dict(self.mem_taint)
        st.flag_taint = self.flag_taint
        return st

    def snapshot(self, with_pc: bool = True, with_taint: bool = True) -> tuple:
        """Hashable view of the state, for bit-exact comparisons."""
        items: tuple = (tuple(self.regs), tuple(self.flags),
                        tuple(sorted((a, v) for a, v in self.memory.items() if v != 0)))
        if with_pc:
            items += (self.pc, tuple(self.call_stack))
        if with_taint:
            items += (tuple(sorted((i, tuple(sorted(t.render() for t in tags)))
                                   for i, tags in enumerate(self.reg_taint) if tags)),
                      tuple(sorted((a, tuple(sorted(t.render() for t in tags)))
                                   for a, tags in self.mem_taint.items() if tags)))
        return items

    def read_mem(self, addr: int) -> int:
        return self.memory.get(addr & WORD_MASK, 0)

    def write_mem(self, addr: int, value: int):
        self.memory[addr & WORD_MASK] = value & WORD_MASK


@dataclass
class ThreadContext:
    thread_id: int
    state: MachineState
    status: str = RUNNABLE
    local_flags: Dict[str, bool] = field(default_factory=dict)
    scratch: Dict[str, int] = field(default_factory=dict)

    @property
    def pc(self) -> int:
        return self.state.pc


def make_thread(thread_id: int, entry: int, args: Tuple[int, ...] = (),
                stack_base: Optional[int] = None) -> ThreadContext:
    st = MachineState(pc=entry)
    for i, a in enumerate(args):
        st.regs[i] = a & WORD_MASK
    st.regs[15] = (stack_base if stack_base is not None
                   else 0x100000 + thread_id * 0x1000) & WORD_MASK
    return ThreadContext(thread_id=thread_id, state=st)


def stack_snapshot(thread: ThreadContext) -> List[int]:
    """Frame pcs from innermost to outermost: current pc, then return addrs."""
    return [thread.state.pc] + list(reversed(thread.state.call_stack))


def _effective_addr(st: MachineState, op: tuple) -> int:
    _, base, index, scale, disp = op
    addr = disp
    if base is not None:
        addr += st.regs[base]
    if index is not None:
        addr += st.regs[index] * scale
    return addr & WORD_MASK


def _read_value(st: MachineState, op: tuple) -> Tuple[int, FrozenSet[TaintTag]]:
    kind = op[0]
    if kind == "r":
        return st.regs[op[1]], st.reg_taint[op[1]]
    if kind == "i":
        return op[1] & WORD_MASK, EMPTY_TAGS
    addr = _effective_addr(st, op)
    # address-forming registers contribute taint to the loaded value
    tags = st.mem_taint.get(addr, EMPTY_TAGS)
    for r in (op[1], op[2]):
        if r is not None and st.reg_taint[r]:
            tags = tags | st.reg_taint[r]
    return st.read_mem(addr), tags


def _alu(opcode: str, a: int, b: int) -> int:
    if opcode == isa.ADD:
        return (a + b) & WORD_MASK
    if opcode == isa.SUB:
        return (a - b) & WORD_MASK
    if opcode == isa.MUL:
        return (a * b) & WORD_MASK
    if opcode == isa.SHL:
        return (a << (b & 63)) & WORD_MASK
    if opcode == isa.SHR:
        return (a >> (b & 63)) & WORD_MASK
    if opcode == isa.AND:
        return a & b
    if opcode == isa.OR:
        return a | b
    if opcode == isa.XOR:
        return a ^ b
    raise ValueError(opcode)


@dataclass
class ExecEvent:
    """Record of one instruction execution: taint consumed and seeded."""
    consumed: FrozenSet[TaintTag] = EMPTY_TAGS
    halted: bool = False


def execute_instruction(program: Program, st: MachineState, ins: Instruction,
                        taint_seeds: Optional[Dict[int, str]] = None) -> ExecEvent:
    """Execute one instruction, mutating ``st``.  Pure in (state, instruction).

    ``taint_seeds`` maps instruction addresses to const ids whose version-0
    tag is stamped on the destination.
    """
    op = ins.opcode
    ops = ins.operands
    next_pc = ins.end
    consumed: FrozenSet[TaintTag] = EMPTY_TAGS
    halted = False

    seed_tags = EMPTY_TAGS
    if taint_seeds is not None:
        cid = taint_seeds.get(ins.address)
        if cid is not None:
            seed_tags = frozenset({TaintTag(cid, 0)})

    if op == isa.NOP:
        pass
    elif op == isa.MOV or op == isa.LOAD:
        val, tags = _read_value(st, ops[1])
        consumed = tags
        dst = ops[0][1]
        st.regs[dst] = val
        st.reg_taint[dst] = tags | seed_tags
    elif op == isa.LEA:
        src = ops[1]
        val = _effective_addr(st, src)
        tags = EMPTY_TAGS
        for r in (src[1], src[2]):
            if r is not None and st.reg_taint[r]:
                tags = tags | st.reg_taint[r]
        consumed = tags
        dst = ops[0][1]
        st.regs[dst] = val
        st.reg_taint[dst] = tags | seed_tags
    elif op == isa.STORE:
        dst, src = ops
        val, tags = _read_value(st, src)
        for r in (dst[1], dst[2]):
            if r is not None and st.reg_taint[r]:
                tags = tags | st.reg_taint[r]
        consumed = tags
        addr = _effective_addr(st, dst)
        st.write_mem(addr, val)
        new_tags = tags | seed_tags
        if new_tags:
            st.mem_taint[addr] = new_tags
        else:
            st.mem_taint.pop(addr, None)
    elif op in isa.ALU_OPS:
        dst = ops[0][1]
        a = st.regs[dst]
        b, btags = _read_value(st, ops[1])
        tags = st.reg_taint[dst] | btags
        consumed = tags
        st.regs[dst] = _alu(op, a, b)
        st.reg_taint[dst] = tags | seed_tags
    elif op == isa.NEG:
        dst = ops[0][1]
        consumed = st.reg_taint[dst]
        st.regs[dst] = (-st.regs[dst]) & WORD_MASK
        st.reg_taint[dst] = consumed | seed_tags
    elif op == isa.CMP:
        a, atags = _read_value(st, ops[0])
        b, btags = _read_value(st, ops[1])
        tags = atags | btags
        consumed = tags
        st.flags = list(isa.compare_flags(a, b))
        st.flag_taint = tags | seed_tags
    elif op in isa.CONDITIONAL_JUMPS:
        consumed = st.flag_taint
        if isa.condition_holds(op, st.flags):
            next_pc = ins.jump_target()
    elif op == isa.JMP:
        next_pc = ins.jump_target()
    elif op == isa.CALL:
        st.call_stack.append(ins.end)
        next_pc = ins.jump_target()
    elif op == isa.RET:
        if st.call_stack:
            next_pc = st.call_stack.pop()
        else:
            halted = True
            next_pc = ins.address  # freeze pc at the final RET
    else:
        raise MvmError(f"unhandled opcode {op}")

    if not halted and program.instr_at(next_pc) is None:
        raise DivergentControl(
            f"control reaches {next_pc:#x}, not an instruction (from {ins!r})")
    st.pc = next_pc
    return ExecEvent(consumed=consumed, halted=halted)
