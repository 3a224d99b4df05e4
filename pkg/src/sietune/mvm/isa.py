"""Instruction set of the mini virtual machine (MVM).

The MVM is a 16-register, 64-bit, word-addressed register machine with an
x86-flavoured surface: variable instruction lengths (authored, not encoded),
a four-bit flag word written only by CMP, and conditional jumps over the
usual signed/unsigned relations.  It is deliberately small: arithmetic and
bitwise ops, loads/stores with base+index*scale+disp addressing, LEA, and
direct calls.  There is no MMU, no interrupts, and no real encoding; the
byte length of an instruction is metadata used by probe placement rules.

Operands are plain tuples so they hash and compare structurally:

    ('r', i)                    register i, 0 <= i <= 15
    ('i', v)                    signed 64-bit immediate
    ('m', base, index, scale, disp)   memory operand; base/index are
                                      register ids or None, scale in
                                      {1, 2, 4, 8}, disp a signed int
"""

from __future__ import annotations

from typing import Optional, Tuple

NUM_REGS = 16
WORD_MASK = (1 << 64) - 1
SIGN_BIT = 1 << 63

# Opcode mnemonics. Jcc is spelled as the individual condition mnemonics.
MOV = "MOV"
LOAD = "LOAD"
STORE = "STORE"
ADD = "ADD"
SUB = "SUB"
MUL = "MUL"
SHL = "SHL"
SHR = "SHR"
AND = "AND"
OR = "OR"
XOR = "XOR"
NEG = "NEG"
LEA = "LEA"
CMP = "CMP"
JMP = "JMP"
CALL = "CALL"
RET = "RET"
NOP = "NOP"

JE, JNE, JL, JLE, JG, JGE, JB, JAE = "JE", "JNE", "JL", "JLE", "JG", "JGE", "JB", "JAE"

CONDITIONAL_JUMPS = frozenset({JE, JNE, JL, JLE, JG, JGE, JB, JAE})
JUMPS = CONDITIONAL_JUMPS | {JMP}
ALU_OPS = frozenset({ADD, SUB, MUL, SHL, SHR, AND, OR, XOR})
OPCODES = frozenset(
    {MOV, LOAD, STORE, NEG, LEA, CMP, JMP, CALL, RET, NOP} | ALU_OPS | CONDITIONAL_JUMPS
)

ZF, SF, CF, OF = 0, 1, 2, 3
FLAG_NAMES = ("ZF", "SF", "CF", "OF")


def reg(i: int) -> tuple:
    assert 0 <= i < NUM_REGS
    return ("r", i)


def imm(v: int) -> tuple:
    return ("i", v)


def mem(base: Optional[int] = None, index: Optional[int] = None,
        scale: int = 1, disp: int = 0) -> tuple:
    assert scale in (1, 2, 4, 8)
    return ("m", base, index, scale, disp)


def is_reg(op) -> bool:
    return type(op) is tuple and op[0] == "r"


def is_imm(op) -> bool:
    return type(op) is tuple and op[0] == "i"


def is_mem(op) -> bool:
    return type(op) is tuple and op[0] == "m"


def to_u64(v: int) -> int:
    return v & WORD_MASK


def to_s64(v: int) -> int:
    v &= WORD_MASK
    return v - (1 << 64) if v & SIGN_BIT else v


# Default byte lengths, modelling x86 variable-length encoding. Reg-reg ALU
# ops are short; a 64-bit immediate MOV is long enough for jump-optimized
# probes; compares against immediates fall just under the 5-byte line.
_IMM_MOV_LEN = 5
_REG_REG_LEN = 3
_REG_IMM_LEN = 4
_MEM_LEN = 5
_JCC_LEN = 2


def default_byte_length(opcode: str, operands: Tuple[tuple, ...]) -> int:
    if opcode in CONDITIONAL_JUMPS or opcode == JMP:
        return _JCC_LEN
    if opcode == CALL:
        return 5
    if opcode in (RET, NOP):
        return 1
    if opcode in (LOAD, STORE):
        return _MEM_LEN + (1 if any(is_imm(o) for o in operands) else 0)
    if opcode == LEA:
        return _REG_IMM_LEN
    if opcode == NEG:
        return _REG_REG_LEN
    if opcode == MOV:
        return _IMM_MOV_LEN if is_imm(operands[1]) else _REG_REG_LEN
    if opcode in ALU_OPS or opcode == CMP:
        return _REG_IMM_LEN if is_imm(operands[1]) else _REG_REG_LEN
    raise ValueError(f"unknown opcode {opcode!r}")


class Instruction:
    """One decoded MVM instruction at a fixed code offset."""

    __slots__ = ("address", "opcode", "operands", "byte_length")

    def __init__(self, address: int, opcode: str, operands: Tuple[tuple, ...] = (),
                 byte_length: Optional[int] = None):
        if opcode not in OPCODES:
            raise ValueError(f"unknown opcode {opcode!r}")
        self.address = address
        self.opcode = opcode
        self.operands = tuple(operands)
        self.byte_length = (byte_length if byte_length is not None
                            else default_byte_length(opcode, self.operands))
        if self.byte_length < 1:
            raise ValueError("byte_length must be >= 1")

    @property
    def end(self) -> int:
        return self.address + self.byte_length

    def is_jump(self) -> bool:
        return self.opcode in JUMPS

    def is_control(self) -> bool:
        return self.opcode in JUMPS or self.opcode in (CALL, RET)

    def jump_target(self) -> Optional[int]:
        if self.opcode in JUMPS or self.opcode == CALL:
            (kind, v) = self.operands[0][:2]
            assert kind == "i"
            return v
        return None

    def regs_read(self) -> tuple:
        """Register ids this instruction reads (data and addressing)."""
        op = self.opcode
        ops = self.operands
        out = []
        if op in (MOV, LOAD, LEA):
            src = ops[1]
            if is_reg(src):
                out.append(src[1])
            elif is_mem(src):
                out += [r for r in (src[1], src[2]) if r is not None]
        elif op == STORE:
            dst, src = ops
            out += [r for r in (dst[1], dst[2]) if r is not None]
            if is_reg(src):
                out.append(src[1])
        elif op in ALU_OPS or op == CMP:
            a, b = ops
            if is_reg(a):
                out.append(a[1])
            if is_reg(b):
                out.append(b[1])
            elif is_mem(b):
                out += [r for r in (b[1], b[2]) if r is not None]
        elif op == NEG:
            out.append(ops[0][1])
        return tuple(out)

    def reg_written(self) -> Optional[int]:
        op = self.opcode
        if op in (MOV, LOAD, LEA) or op in ALU_OPS or op == NEG:
            dst = self.operands[0]
            if is_reg(dst):
                return dst[1]
        return None

    def reads_flags(self) -> bool:
        return self.opcode in CONDITIONAL_JUMPS

    def writes_flags(self) -> bool:
        return self.opcode == CMP

    def key(self) -> tuple:
        """Position-independent shape: address and jump displacements erased."""
        if self.opcode in JUMPS or self.opcode == CALL:
            return (self.opcode, None)
        return (self.opcode,) + self.operands

    def render(self) -> str:
        parts = [render_operand(o) for o in self.operands]
        body = f"{self.opcode} " + ", ".join(parts) if parts else self.opcode
        return body.rstrip()

    def __repr__(self) -> str:
        return f"<{self.address:#06x}: {self.render()} ; len={self.byte_length}>"

    def __eq__(self, other) -> bool:
        return (isinstance(other, Instruction)
                and self.address == other.address
                and self.opcode == other.opcode
                and self.operands == other.operands
                and self.byte_length == other.byte_length)

    def __hash__(self) -> int:
        return hash((self.address, self.opcode, self.operands, self.byte_length))


def render_operand(op: tuple) -> str:
    if is_reg(op):
        return f"r{op[1]}"
    if is_imm(op):
        return f"#{op[1]}"
    _, base, index, scale, disp = op
    parts = []
    if base is not None:
        parts.append(f"r{base}")
    if index is not None:
        parts.append(f"r{index}*{scale}" if scale != 1 else f"r{index}")
    if disp or not parts:
        parts.append(f"{disp:#x}" if disp >= 0 else f"-{-disp:#x}")
    return "[" + "+".join(parts) + "]"


def condition_holds(opcode: str, flags) -> bool:
    zf, sf, cf, of = flags
    if opcode == JE:
        return zf
    if opcode == JNE:
        return not zf
    if opcode == JL:
        return sf != of
    if opcode == JLE:
        return zf or (sf != of)
    if opcode == JG:
        return (not zf) and (sf == of)
    if opcode == JGE:
        return sf == of
    if opcode == JB:
        return cf
    if opcode == JAE:
        return not cf
    raise ValueError(f"not a conditional jump: {opcode}")


def compare_flags(lhs: int, rhs: int) -> tuple:
    """Flags of CMP lhs, rhs: the arithmetic result of lhs - rhs."""
    lhs &= WORD_MASK
    rhs &= WORD_MASK
    res = (lhs - rhs) & WORD_MASK
    zf = res == 0
    sf = bool(res & SIGN_BIT)
    cf = lhs < rhs  # unsigned borrow
    of = ((lhs ^ rhs) & (lhs ^ res) & SIGN_BIT) != 0
    return (zf, sf, cf, of)
