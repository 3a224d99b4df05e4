"""Program container: functions, basic blocks, and the text assembly format.

A Program is an immutable, address-ordered instruction list plus derived
structure: function table, basic-block partition, and the set of jump
targets.  Addresses are cumulative byte offsets (each instruction occupies
``byte_length`` units), so straight-line fallthrough lands exactly on the
next instruction.

Text format, one instruction per line::

    fn main:
    .block
    0x0000: MOV r6, #5      ; len=5
    0x0005: ADD r6, r1

``fn NAME:`` starts a function at the next instruction's address; ``.block``
forces a block leader.  Parsing is case-insensitive.  Jump and call operands
are absolute numeric addresses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import isa
from .isa import Instruction


class ProgramError(Exception):
    pass


@dataclass(frozen=True)
class Block:
    start: int              # address of first instruction
    end: int                # address of last instruction (inclusive)
    addrs: Tuple[int, ...]  # member instruction addresses, ordered
    succs: Tuple[int, ...]  # successor block start addresses


@dataclass(frozen=True)
class Function:
    name: str
    entry: int
    blocks: Tuple[Block, ...] = ()

    @property
    def start(self) -> int:
        return self.entry

    @property
    def end(self) -> int:
        return self.blocks[-1].end if self.blocks else self.entry


@dataclass
class Program:
    instructions: List[Instruction]
    functions: List[Function] = field(default_factory=list)
    blocks: List[Block] = field(default_factory=list)
    jump_targets: frozenset = frozenset()
    _by_addr: Dict[int, Instruction] = field(default_factory=dict, repr=False)
    _func_of: Dict[int, str] = field(default_factory=dict, repr=False)
    _block_of: Dict[int, Block] = field(default_factory=dict, repr=False)

    def instr_at(self, addr: int) -> Optional[Instruction]:
        return self._by_addr.get(addr)

    def function_of(self, addr: int) -> Optional[str]:
        return self._func_of.get(addr)

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def block_of(self, addr: int) -> Optional[Block]:
        return self._block_of.get(addr)

    def next_addr(self, addr: int) -> Optional[int]:
        ins = self._by_addr.get(addr)
        if ins is None:
            return None
        nxt = ins.end
        return nxt if nxt in self._by_addr else None

    def function_instructions(self, name: str) -> List[Instruction]:
        f = self.function(name)
        return [i for i in self.instructions if self._func_of.get(i.address) == name]

    def render(self) -> str:
        lines = []
        leaders = {b.start for b in self.blocks}
        entries = {f.entry: f.name for f in self.functions}
        for ins in self.instructions:
            if ins.address in entries:
                lines.append(f"fn {entries[ins.address]}:")
            elif ins.address in leaders:
                lines.append(".block")
            lines.append(f"{ins.address:#06x}: {ins.render()} ; len={ins.byte_length}")
        return "\n".join(lines) + "\n"


def assemble(instr_lists: Sequence[Tuple[str, Sequence[Instruction]]]) -> Program:
    """Build a Program from (function name, instruction list) pairs.

    Instruction addresses must already be assigned, strictly increasing, and
    contiguous within each function (address + byte_length reaches the next
    instruction).  Gaps are allowed between functions.
    """
    all_instrs: List[Instruction] = []
    entries: List[Tuple[str, int]] = []
    for name, instrs in instr_lists:
        instrs = list(instrs)
        if not instrs:
            raise ProgramError(f"function {name!r} has no instructions")
        entries.append((name, instrs[0].address))
        for a, b in zip(instrs, instrs[1:]):
            if a.end != b.address:
                raise ProgramError(
                    f"non-contiguous addresses in {name!r}: "
                    f"{a.address:#x}+{a.byte_length} != {b.address:#x}")
        all_instrs.extend(instrs)

    by_addr: Dict[int, Instruction] = {}
    for ins in all_instrs:
        if ins.address in by_addr:
            raise ProgramError(f"duplicate address {ins.address:#x}")
        by_addr[ins.address] = ins
    all_instrs.sort(key=lambda i: i.address)

    targets = set()
    for ins in all_instrs:
        t = ins.jump_target()
        if t is not None:
            if t not in by_addr:
                raise ProgramError(f"{ins!r} targets {t:#x}, not an instruction")
            targets.add(t)
    jump_targets = frozenset(targets | {a for _, a in entries})

    # Function extents: from entry to the last instruction before the next entry.
    entries.sort(key=lambda e: e[1])
    func_of: Dict[int, str] = {}
    bounds: Dict[str, Tuple[int, int]] = {}
    for idx, (name, entry) in enumerate(entries):
        limit = entries[idx + 1][1] if idx + 1 < len(entries) else float("inf")
        fin = [i for i in all_instrs if entry <= i.address < limit]
        for i in fin:
            func_of[i.address] = name
        bounds[name] = (entry, fin[-1].address)

    # Block leaders: function entries, jump targets, and fallthrough points
    # after any control transfer (CALL included; spans never cross calls).
    leaders = set(jump_targets)
    for ins in all_instrs:
        if ins.is_control():
            nxt = ins.end
            if nxt in by_addr:
                leaders.add(nxt)

    blocks: List[Block] = []
    block_of: Dict[int, Block] = {}
    cur: List[Instruction] = []

    def close(cur_list: List[Instruction]):
        if not cur_list:
            return
        last = cur_list[-1]
        succs: List[int] = []
        if last.opcode in isa.CONDITIONAL_JUMPS:
            succs = [last.jump_target(), last.end]
        elif last.opcode == isa.JMP:
            succs = [last.jump_target()]
        elif last.opcode == isa.RET:
            succs = []
        else:  # fallthrough (including CALL: control returns to the next instr)
            if last.end in by_addr and func_of.get(last.end) == func_of.get(last.address):
                succs = [last.end]
        blk = Block(start=cur_list[0].address, end=last.address,
                    addrs=tuple(i.address for i in cur_list), succs=tuple(succs))
        blocks.append(blk)
        for i in cur_list:
            block_of[i.address] = blk

    prev_fn = None
    for ins in all_instrs:
        fn = func_of[ins.address]
        if cur and (ins.address in leaders or fn != prev_fn):
            close(cur)
            cur = []
        cur.append(ins)
        prev_fn = fn
        if ins.is_control():
            close(cur)
            cur = []
    close(cur)

    functions = []
    for name, entry in entries:
        fblocks = tuple(b for b in blocks if func_of[b.start] == name)
        functions.append(Function(name=name, entry=entry, blocks=fblocks))

    return Program(instructions=all_instrs, functions=functions, blocks=blocks,
                   jump_targets=jump_targets, _by_addr=by_addr,
                   _func_of=func_of, _block_of=block_of)


_LINE_RE = re.compile(
    r"^\s*(?:(?P<addr>(?:0x)?[0-9a-f]+)\s*:)?\s*(?P<body>[a-z]+[^;]*?)\s*(?:;\s*len\s*=\s*(?P<len>\d+)\s*)?$",
    re.IGNORECASE)
_MEM_RE = re.compile(
    r"^\[\s*(?:r(?P<base>\d+))?\s*(?:\+\s*r(?P<index>\d+)(?:\s*\*\s*(?P<scale>[1248]))?)?"
    r"\s*(?:(?P<sign>[+-])\s*(?P<disp>(?:0x)?[0-9a-f]+))?\s*\]$", re.IGNORECASE)


def _parse_int(text: str) -> int:
    return int(text, 16) if text.lower().startswith("0x") else int(text, 10)


def _parse_operand(text: str) -> tuple:
    text = text.strip()
    low = text.lower()
    if low.startswith("#"):
        return isa.imm(_parse_int(low[1:]) if not low[1:].startswith("-")
                       else -_parse_int(low[2:]))
    if re.fullmatch(r"r\d+", low):
        return isa.reg(int(low[1:]))
    if low.startswith("["):
        # normalize "[0x10]" (absolute) and "[r15+2]" forms
        m = _MEM_RE.match(low)
        if not m:
            # bare absolute address form "[123]" / "[0x7b]"
            inner = low[1:-1].strip()
            return isa.mem(disp=_parse_int(inner))
        base = int(m.group("base")) if m.group("base") else None
        index = int(m.group("index")) if m.group("index") else None
        scale = int(m.group("scale")) if m.group("scale") else 1
        disp = _parse_int(m.group("disp")) if m.group("disp") else 0
        if m.group("sign") == "-":
            disp = -disp
        if base is None and index is None:
            return isa.mem(disp=disp)
        return isa.mem(base=base, index=index, scale=scale, disp=disp)
    # bare integer: jump/call target address
    if re.fullmatch(r"-?(?:0x)?[0-9a-f]+", low):
        neg = low.startswith("-")
        v = _parse_int(low[1:]) if neg else _parse_int(low)
        return isa.imm(-v if neg else v)
    raise ProgramError(f"cannot parse operand {text!r}")


def parse_asm(text: str) -> Program:
    """Parse the line-oriented assembly format into a Program."""
    funcs: List[Tuple[str, List[Instruction]]] = []
    cur_name: Optional[str] = None
    cur: List[Instruction] = []
    next_addr = 0

    def flush():
        nonlocal cur
        if cur_name is not None:
            funcs.append((cur_name, cur))
        cur = []

    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):  # whole-line comments only: '#'
            continue
        low = line.lower()
        if low.startswith("fn ") and low.endswith(":"):
            flush()
            cur_name = line[3:-1].strip()
            continue
        if low == ".block":
            continue  # block structure is re-derived from control flow
        m = _LINE_RE.match(line)
        if not m:
            raise ProgramError(f"cannot parse line {raw!r}")
        body = m.group("body").strip()
        parts = body.split(None, 1)
        opcode = parts[0].upper()
        operands: List[tuple] = []
        if len(parts) > 1:
            operands = [_parse_operand(p) for p in _split_operands(parts[1])]
        addr = _parse_int(m.group("addr")) if m.group("addr") else next_addr
        blen = int(m.group("len")) if m.group("len") else None
        ins = Instruction(addr, opcode, tuple(operands), blen)
        next_addr = ins.end
        if cur_name is None:
            cur_name = "main"
        cur.append(ins)
    flush()
    return assemble(funcs)


def _split_operands(text: str) -> List[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur))
    return [p.strip() for p in out if p.strip()]
