"""Lowering from source IR to MVM instructions.

Register convention:
    r0..r5    argument / expression-temp stack (caller clobbered)
    r6..r13   named locals, assigned in first-appearance order (callee saved)
    r14       reserved for interleaving noise
    r15       stack pointer (frames grow down, word granularity)

Calls are statement-level; the callee saves every local register it uses in
its own frame, so caller locals survive calls.  Strength reduction rewrites
multiply-by-constant into single-register chains over {ADD r,r; SHL; LEA}
for factorable multipliers up to 18 and falls back to a literal MUL
otherwise, so rebuilding with a different constant genuinely changes the
opcode shape.  A perf-const never influences frame or buffer sizes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from ..mvm import isa
from ..mvm.isa import Instruction
from ..mvm.program import Program, assemble
from .ast import (Assign, AugAssign, Bin, Branch, BufDecl, CallStmt, FuncDef,
                  Goto, LabelStmt, LoadStmt, Neg, Num, Return, SourceError,
                  SourceUnit, StoreStmt, Var)
from .passes import UnsupportedStatement

GLOBAL_BASE = 0x200000
TEMP_LIMIT = 6           # r0..r5
LOCAL_BASE, LOCAL_LIMIT = 6, 14   # r6..r13
NOISE_REG = 14
SP = 15

_BINOP = {"+": isa.ADD, "-": isa.SUB, "*": isa.MUL, "<<": isa.SHL,
          ">>": isa.SHR, "&": isa.AND, "|": isa.OR, "^": isa.XOR}
_COMMUTATIVE = {"+", "*", "&", "|", "^"}
_REL_JCC = {"==": isa.JE, "!=": isa.JNE, "<": isa.JL, "<=": isa.JLE,
            ">": isa.JG, ">=": isa.JGE, "u<": isa.JB, "u>=": isa.JAE}

# Single-register multiply chains: each step reads and writes only the
# target register, so rebuilding with a different multiplier perturbs no
# other machine state.  Steps: ("ADD",) doubles, ("SHL", k) scales by 2^k,
# ("LEA", s) scales by 1+s.  Multipliers up to 36 that factor into at most
# three steps get a chain; everything else is a literal MUL.
_CHAIN_MAX = 36
_STEP_CHOICES = ((("ADD",), 2), (("LEA", 2), 3), (("SHL", 2), 4),
                 (("LEA", 4), 5), (("SHL", 3), 8), (("LEA", 8), 9),
                 (("SHL", 4), 16), (("SHL", 5), 32))


def _build_chain_table() -> Dict[int, Tuple[tuple, ...]]:
    table: Dict[int, Tuple[tuple, ...]] = {}
    frontier: List[Tuple[int, Tuple[tuple, ...]]] = [(1, ())]
    for _ in range(3):
        nxt = []
        for product, steps in frontier:
            for step, factor in _STEP_CHOICES:
                m = product * factor
                if m > _CHAIN_MAX:
                    continue
                if m not in table:
                    table[m] = steps + (step,)
                    nxt.append((m, steps + (step,)))
        frontier = nxt
    return table


CHAIN_STEPS: Dict[int, Tuple[tuple, ...]] = _build_chain_table()


@dataclass
class Pending:
    opcode: str
    operands: tuple
    cids: FrozenSet[str] = frozenset()
    noise: bool = False
    stmt_key: Optional[tuple] = None   # (fn, stmt seq index)
    address: int = 0
    byte_length: int = 0


@dataclass
class DebugRange:
    line: int
    lo: int
    hi: int


@dataclass
class Lowering:
    """Raw lowering output, before Program assembly."""
    instructions: List[Instruction]
    functions: List[Tuple[str, List[Instruction]]]
    debug_map: Dict[tuple, DebugRange]
    const_sites: Dict[str, List[Tuple[str, int, int]]]
    noise_addresses: Set[int]
    imm_provenance: Dict[int, FrozenSet[str]]

    def program(self) -> Program:
        return assemble(self.functions)


class _FuncGen:
    def __init__(self, unit: "Lowerer", fn: FuncDef):
        self.unit = unit
        self.fn = fn
        self.out: List[Pending] = []
        self.labels: Dict[str, int] = {}     # label -> index into self.out
        self.local_regs: Dict[str, int] = {}
        self.buf_offsets: Dict[str, int] = {}
        self.frame_size = 0
        self.read_counts: Dict[str, int] = {}
        self.stmt_key: Optional[tuple] = None

    # -- allocation -------------------------------------------------------

    def allocate(self):
        names: List[str] = list(self.fn.params)
        bufs: List[Tuple[str, int]] = []
        for s in self.fn.body:
            if isinstance(s, BufDecl):
                bufs.append((s.name, s.size))
                continue
            for nm in _defs(s):
                if nm not in names:
                    names.append(nm)
        for i, nm in enumerate(names):
            r = LOCAL_BASE + i
            if r >= LOCAL_LIMIT:
                raise UnsupportedStatement(
                    f"fn {self.fn.name}: too many locals (max {LOCAL_LIMIT - LOCAL_BASE})")
            self.local_regs[nm] = r
        nsave = len(self.local_regs)
        off = nsave
        for nm, size in bufs:
            if size < 1:
                raise UnsupportedStatement(f"buf {nm}: size must be >= 1")
            self.buf_offsets[nm] = off
            off += size
        self.frame_size = off
        for s in self.fn.body:
            for nm in _reads(s):
                self.read_counts[nm] = self.read_counts.get(nm, 0) + 1

    # -- emission ---------------------------------------------------------

    def emit(self, opcode, *operands, cids=frozenset(), noise=False):
        self.out.append(Pending(opcode, tuple(operands), cids=cids, noise=noise,
                                stmt_key=self.stmt_key))

    def emit_noise(self, stmt_idx: int):
        if "noise" not in self.unit.passes:
            return
        rng = random.Random(f"{self.unit.noise_seed}:{self.fn.name}:{stmt_idx}")
        n = 1 if rng.random() < 0.30 else 0
        if n and rng.random() < 0.25:
            n = 2
        for _ in range(n):
            pick = rng.randrange(3)
            if pick == 0:
                self.emit(isa.XOR, isa.reg(NOISE_REG), isa.reg(NOISE_REG), noise=True)
            elif pick == 1:
                self.emit(isa.MOV, isa.reg(NOISE_REG),
                          isa.imm(rng.randrange(1 << 16)), noise=True)
            else:
                self.emit(isa.ADD, isa.reg(NOISE_REG),
                          isa.imm(rng.randrange(1 << 16)), noise=True)

    # -- expression lowering ----------------------------------------------

    def operand_for(self, e, allow_imm=True):
        """Direct operand for a leaf expression, or None if it needs a temp."""
        if isinstance(e, Num) and allow_imm and "immmerge" in self.unit.passes:
            return isa.imm(isa.to_s64(e.value)), e.cids
        if isinstance(e, Var) and e.name in self.local_regs:
            return isa.reg(self.local_regs[e.name]), frozenset()
        return None

    def eval_expr(self, e, d: int):
        """Emit code leaving the value of ``e`` in temp register r{d}."""
        if d >= TEMP_LIMIT:
            raise UnsupportedStatement(
                f"fn {self.fn.name}: expression too deep (max {TEMP_LIMIT} temps)")
        t = isa.reg(d)
        if isinstance(e, Num):
            self.emit(isa.MOV, t, isa.imm(isa.to_s64(e.value)), cids=e.cids)
            return
        if isinstance(e, Var):
            nm = e.name
            if nm in self.local_regs:
                self.emit(isa.MOV, t, isa.reg(self.local_regs[nm]))
            elif nm in self.buf_offsets:
                self.emit(isa.LEA, t, isa.mem(base=SP, disp=self.buf_offsets[nm]))
            elif nm in self.unit.global_addrs:
                self.emit(isa.MOV, t, isa.imm(self.unit.global_addrs[nm]))
            else:
                raise SourceError(f"fn {self.fn.name}: unknown name {nm!r}")
            return
        if isinstance(e, Neg):
            self.eval_expr(e.arg, d)
            self.emit(isa.NEG, t)
            return
        if isinstance(e, Bin):
            lhs, rhs = e.lhs, e.rhs
            if (e.op in _COMMUTATIVE and isinstance(lhs, Num)
                    and not isinstance(rhs, Num)):
                lhs, rhs = rhs, lhs
            if (e.op == "*" and isinstance(rhs, Num)
                    and "strength" in self.unit.passes):
                self.eval_expr(lhs, d)
                self.emit_mul_const(d, rhs.value, rhs.cids)
                return
            self.eval_expr(lhs, d)
            direct = self.operand_for(rhs)
            if direct is not None:
                op, cids = direct
                self.emit(_BINOP[e.op], t, op, cids=cids)
            else:
                self.eval_expr(rhs, d + 1)
                self.emit(_BINOP[e.op], t, isa.reg(d + 1))
            return
        raise SourceError(f"fn {self.fn.name}: cannot lower expression {e!r}")

    def emit_mul_const(self, r: int, m: int, cids: FrozenSet[str]):
        m = isa.to_s64(m)
        t = isa.reg(r)
        if m == 0:
            self.emit(isa.MOV, t, isa.imm(0), cids=cids)
            return
        if m == 1:
            return
        steps = CHAIN_STEPS.get(m)
        if steps is None:
            self.emit(isa.MUL, t, isa.imm(m), cids=cids)
            return
        for step in steps:
            if step[0] == "ADD":
                self.emit(isa.ADD, t, t, cids=cids)
            elif step[0] == "SHL":
                self.emit(isa.SHL, t, isa.imm(step[1]), cids=cids)
            else:
                self.emit(isa.LEA, t, isa.mem(base=r, index=r, scale=step[1]),
                          cids=cids)

    def addr_operand(self, e, d: int):
        """Memory operand for an address expression, keeping sp/global forms
        syntactic so static slicing stays address-precise."""
        base_off = 0
        core = e
        if isinstance(e, Bin) and e.op == "+" and isinstance(e.rhs, Num):
            core, base_off = e.lhs, isa.to_s64(e.rhs.value)
        elif isinstance(e, Bin) and e.op == "+" and isinstance(e.lhs, Num):
            core, base_off = e.rhs, isa.to_s64(e.lhs.value)
        if isinstance(core, Var):
            nm = core.name
            if nm in self.buf_offsets:
                return isa.mem(base=SP, disp=self.buf_offsets[nm] + base_off)
            if nm in self.unit.global_addrs:
                return isa.mem(disp=self.unit.global_addrs[nm] + base_off)
            if nm in self.local_regs:
                return isa.mem(base=self.local_regs[nm], disp=base_off)
        if isinstance(core, Num):
            return isa.mem(disp=isa.to_s64(core.value) + base_off)
        self.eval_expr(e, d)
        return isa.mem(base=d)

    # -- statements ---------------------------------------------------------

    def gen(self):
        self.allocate()
        self.prologue()
        body = list(self.fn.body)
        if not body or not isinstance(body[-1], (Return, Goto)):
            body.append(Return(line=self.fn.line, expr=None))
        for idx, s in enumerate(body):
            self.stmt_key = (self.fn.name, idx)
            self.unit.stmt_lines[self.stmt_key] = s.line
            if isinstance(s, LabelStmt):
                self.labels[s.name] = len(self.out)
                continue
            if isinstance(s, BufDecl):
                continue
            self.emit_noise(idx)
            self.stmt(s)
        self.stmt_key = None

    def prologue(self):
        self.stmt_key = (self.fn.name, -1)
        self.unit.stmt_lines[self.stmt_key] = self.fn.line
        if self.frame_size:
            self.emit(isa.SUB, isa.reg(SP), isa.imm(self.frame_size))
        for i, nm in enumerate(self.local_regs):
            self.emit(isa.STORE, isa.mem(base=SP, disp=i),
                      isa.reg(self.local_regs[nm]))
        for pos, p in enumerate(self.fn.params):
            self.emit(isa.MOV, isa.reg(self.local_regs[p]), isa.reg(pos))

    def epilogue(self):
        for i, nm in enumerate(self.local_regs):
            self.emit(isa.LOAD, isa.reg(self.local_regs[nm]),
                      isa.mem(base=SP, disp=i))
        if self.frame_size:
            self.emit(isa.ADD, isa.reg(SP), isa.imm(self.frame_size))
        self.emit(isa.RET)

    def stmt(self, s):
        if isinstance(s, Assign):
            self.gen_assign(s)
        elif isinstance(s, AugAssign):
            self.gen_aug(s)
        elif isinstance(s, LoadStmt):
            op = self.addr_operand(s.addr, 0)
            self.emit(isa.LOAD, isa.reg(self.local_regs[s.name]), op)
        elif isinstance(s, StoreStmt):
            src = self.operand_for(s.value)
            if src is None:
                self.eval_expr(s.value, 0)
                src = (isa.reg(0), frozenset())
            addr = self.addr_operand(s.addr, 1)
            self.emit(isa.STORE, addr, src[0], cids=src[1])
        elif isinstance(s, Branch):
            self.gen_branch(s)
        elif isinstance(s, Goto):
            self.emit(isa.JMP, ("label", s.label))
        elif isinstance(s, CallStmt):
            self.gen_call(s)
        elif isinstance(s, Return):
            if s.expr is None:
                self.emit(isa.MOV, isa.reg(0), isa.imm(0))
            else:
                direct = self.operand_for(s.expr)
                if direct is not None:
                    self.emit(isa.MOV, isa.reg(0), direct[0], cids=direct[1])
                else:
                    self.eval_expr(s.expr, 0)
            self.epilogue()
        else:
            raise UnsupportedStatement(f"line {s.line}: cannot lower {s!r}")

    def gen_assign(self, s: Assign):
        dest = self.local_regs[s.name]
        e = s.expr
        if isinstance(e, Bin) and e.op == "*" and "strength" in self.unit.passes:
            var, num = None, None
            if isinstance(e.lhs, Var) and isinstance(e.rhs, Num):
                var, num = e.lhs, e.rhs
            elif isinstance(e.rhs, Var) and isinstance(e.lhs, Num):
                var, num = e.rhs, e.lhs
            if var is not None and var.name in self.local_regs:
                src = self.local_regs[var.name]
                if src == dest:
                    self.emit_mul_const(dest, num.value, num.cids)
                    return
                if self.read_counts.get(var.name, 0) == 1:
                    # the source dies here: scale it in place, then move
                    self.emit_mul_const(src, num.value, num.cids)
                    self.emit(isa.MOV, isa.reg(dest), isa.reg(src))
                    return
        direct = self.operand_for(e)
        if direct is not None:
            self.emit(isa.MOV, isa.reg(dest), direct[0], cids=direct[1])
            return
        self.eval_expr(e, 0)
        self.emit(isa.MOV, isa.reg(dest), isa.reg(0))

    def gen_aug(self, s: AugAssign):
        dest = self.local_regs[s.name]
        t = isa.reg(dest)
        e = s.expr
        if s.op == "*" and isinstance(e, Num) and "strength" in self.unit.passes:
            self.emit_mul_const(dest, e.value, e.cids)
            return
        direct = self.operand_for(e)
        if direct is not None:
            self.emit(_BINOP[s.op], t, direct[0], cids=direct[1])
            return
        self.eval_expr(e, 0)
        self.emit(_BINOP[s.op], t, isa.reg(0))

    def gen_branch(self, s: Branch):
        lhs = self.operand_for(s.lhs, allow_imm=False)
        if lhs is None:
            self.eval_expr(s.lhs, 0)
            lhs = (isa.reg(0), frozenset())
        rhs = self.operand_for(s.rhs)
        if rhs is None:
            self.eval_expr(s.rhs, 1)
            rhs = (isa.reg(1), frozenset())
        self.emit(isa.CMP, lhs[0], rhs[0], cids=lhs[1] | rhs[1])
        self.emit(_REL_JCC[s.rel], ("label", s.label))

    def gen_call(self, s: CallStmt):
        if len(s.args) > TEMP_LIMIT:
            raise UnsupportedStatement(f"line {s.line}: too many call arguments")
        for i, a in enumerate(s.args):
            direct = self.operand_for(a)
            if direct is not None:
                self.emit(isa.MOV, isa.reg(i), direct[0], cids=direct[1])
            else:
                self.eval_expr(a, i)
        self.emit(isa.CALL, ("fnref", s.func))
        if s.dest is not None:
            self.emit(isa.MOV, isa.reg(self.local_regs[s.dest]), isa.reg(0))


def _defs(s) -> List[str]:
    if isinstance(s, (Assign, AugAssign, LoadStmt)):
        return [s.name]
    if isinstance(s, CallStmt) and s.dest:
        return [s.dest]
    return []


def _reads(s) -> List[str]:
    out: List[str] = []

    def walk(e):
        if isinstance(e, Var):
            out.append(e.name)
        elif isinstance(e, Bin):
            walk(e.lhs)
            walk(e.rhs)
        elif isinstance(e, Neg):
            walk(e.arg)

    if isinstance(s, Assign):
        walk(s.expr)
    elif isinstance(s, AugAssign):
        out.append(s.name)
        walk(s.expr)
    elif isinstance(s, (LoadStmt,)):
        walk(s.addr)
    elif isinstance(s, StoreStmt):
        walk(s.addr)
        walk(s.value)
    elif isinstance(s, Branch):
        walk(s.lhs)
        walk(s.rhs)
    elif isinstance(s, CallStmt):
        for a in s.args:
            walk(a)
    elif isinstance(s, Return) and s.expr is not None:
        walk(s.expr)
    return out


class Lowerer:
    def __init__(self, unit: SourceUnit, passes: frozenset, noise_seed: int):
        self.unit = unit
        self.passes = passes
        self.noise_seed = noise_seed
        self.global_addrs = {nm: GLOBAL_BASE + i for i, nm in enumerate(unit.globals)}
        self.stmt_lines: Dict[tuple, int] = {}

    def lower(self) -> Lowering:
        gens: List[_FuncGen] = []
        order = sorted(self.unit.functions, key=lambda f: (f.name != "main",))
        for fn in order:
            g = _FuncGen(self, fn)
            g.gen()
            gens.append(g)

        # layout: assign addresses, then resolve label/function references
        addr = 0
        entries: Dict[str, int] = {}
        for g in gens:
            entries[g.fn.name] = addr
            for p in g.out:
                p.address = addr
                p.byte_length = _pending_length(p)
                addr += p.byte_length

        label_addr: Dict[Tuple[str, str], int] = {}
        for g in gens:
            for name, idx in g.labels.items():
                if idx >= len(g.out):
                    raise UnsupportedStatement(
                        f"fn {g.fn.name}: label {name!r} at end of function")
                label_addr[(g.fn.name, name)] = g.out[idx].address

        functions: List[Tuple[str, List[Instruction]]] = []
        debug: Dict[tuple, DebugRange] = {}
        sites: Dict[str, List[Tuple[str, int, int]]] = {}
        noise_addrs: Set[int] = set()
        provenance: Dict[int, FrozenSet[str]] = {}
        all_instrs: List[Instruction] = []
        stmt_cids: Dict[tuple, set] = {}

        for g in gens:
            instrs: List[Instruction] = []
            for p in g.out:
                operands = []
                for op in p.operands:
                    if type(op) is tuple and op and op[0] == "label":
                        operands.append(isa.imm(label_addr[(g.fn.name, op[1])]))
                    elif type(op) is tuple and op and op[0] == "fnref":
                        if op[1] not in entries:
                            raise SourceError(f"call to unknown function {op[1]!r}")
                        operands.append(isa.imm(entries[op[1]]))
                    else:
                        operands.append(op)
                ins = Instruction(p.address, p.opcode, tuple(operands),
                                  p.byte_length)
                instrs.append(ins)
                if p.noise:
                    noise_addrs.add(p.address)
                if p.cids:
                    provenance[p.address] = p.cids
                    stmt_cids.setdefault(p.stmt_key, set()).update(p.cids)
                if p.stmt_key is not None:
                    rng = debug.get(p.stmt_key)
                    if rng is None:
                        debug[p.stmt_key] = DebugRange(
                            self.stmt_lines.get(p.stmt_key, 0),
                            p.address, ins.end - 1)
                    else:
                        rng.hi = ins.end - 1
            functions.append((g.fn.name, instrs))
            all_instrs.extend(instrs)

        for key, cids in stmt_cids.items():
            rng = debug[key]
            for cid in cids:
                sites.setdefault(cid, []).append((key[0], rng.lo, rng.hi))
        for cid in sites:
            sites[cid].sort()

        return Lowering(instructions=all_instrs, functions=functions,
                        debug_map=debug, const_sites=sites,
                        noise_addresses=noise_addrs, imm_provenance=provenance)


def _pending_length(p: Pending) -> int:
    if p.opcode in isa.CONDITIONAL_JUMPS or p.opcode == isa.JMP:
        return 2
    if p.opcode == isa.CALL:
        return 5
    return isa.default_byte_length(p.opcode, p.operands)
