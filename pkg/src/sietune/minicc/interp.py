"""Reference interpreter for source units.

Executes the AST directly with 64-bit wrap-around semantics; the oracle
against which every build's concrete behaviour is checked.  Buffers live
in a private address range per activation so they never collide with the
globals segment.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

from .ast import (Assign, AugAssign, Bin, Branch, BufDecl, CallStmt, FuncDef,
                  Goto, LabelStmt, LoadStmt, Neg, Num, PerfRef, Return,
                  SourceError, SourceUnit, StoreStmt, Var)
from .codegen import GLOBAL_BASE
from .passes import _eval_bin

WORD = (1 << 64) - 1
_FRAME_BASE = 0x800000
_FRAME_STRIDE = 0x1000


class InterpLimit(Exception):
    pass


class Interp:
    def __init__(self, unit: SourceUnit, values: Dict[str, int],
                 max_steps: int = 100_000):
        self.unit = unit
        self.values = values
        self.memory: Dict[int, int] = {}
        self.global_addrs = {nm: GLOBAL_BASE + i for i, nm in enumerate(unit.globals)}
        self.budget = max_steps
        self.depth = 0

    def run(self, func: str = "main", args: Tuple[int, ...] = ()) -> int:
        return self.call(func, [a & WORD for a in args])

    def call(self, name: str, args: List[int]) -> int:
        fn = self.unit.function(name)
        if len(args) != len(fn.params):
            raise SourceError(f"arity mismatch calling {name}")
        self.depth += 1
        if self.depth > 64:
            raise InterpLimit("call depth exceeded")
        env: Dict[str, int] = dict(zip(fn.params, args))
        bufs: Dict[str, int] = {}
        base = _FRAME_BASE + self.depth * _FRAME_STRIDE
        off = 0
        labels = {s.name: i for i, s in enumerate(fn.body) if isinstance(s, LabelStmt)}
        i = 0
        ret = 0
        while i < len(fn.body):
            self.budget -= 1
            if self.budget <= 0:
                raise InterpLimit("interpreter step budget exhausted")
            s = fn.body[i]
            i += 1
            if isinstance(s, LabelStmt):
                continue
            if isinstance(s, BufDecl):
                bufs[s.name] = base + off
                off += s.size
            elif isinstance(s, Assign):
                env[s.name] = self.eval(s.expr, env, bufs)
            elif isinstance(s, AugAssign):
                cur = env.get(s.name, 0)
                env[s.name] = _eval_bin(s.op, cur, self.eval(s.expr, env, bufs))
            elif isinstance(s, LoadStmt):
                env[s.name] = self.memory.get(self.eval(s.addr, env, bufs), 0)
            elif isinstance(s, StoreStmt):
                self.memory[self.eval(s.addr, env, bufs)] = \
                    self.eval(s.value, env, bufs)
            elif isinstance(s, Branch):
                a = self.eval(s.lhs, env, bufs)
                b = self.eval(s.rhs, env, bufs)
                if _relation(s.rel, a, b):
                    i = labels[s.label]
            elif isinstance(s, Goto):
                i = labels[s.label]
            elif isinstance(s, CallStmt):
                r = self.call(s.func, [self.eval(a, env, bufs) for a in s.args])
                if s.dest is not None:
                    env[s.dest] = r
            elif isinstance(s, Return):
                ret = self.eval(s.expr, env, bufs) if s.expr is not None else 0
                break
            else:
                raise SourceError(f"cannot interpret {s!r}")
        self.depth -= 1
        return ret

    def eval(self, e, env, bufs) -> int:
        if isinstance(e, Num):
            return e.value & WORD
        if isinstance(e, PerfRef):
            return self.values[e.const_id] & WORD
        if isinstance(e, Var):
            if e.name in env:
                return env[e.name]
            if e.name in bufs:
                return bufs[e.name]
            if e.name in self.global_addrs:
                return self.global_addrs[e.name]
            raise SourceError(f"unknown name {e.name!r}")
        if isinstance(e, Bin):
            return _eval_bin(e.op, self.eval(e.lhs, env, bufs),
                             self.eval(e.rhs, env, bufs))
        if isinstance(e, Neg):
            return (-self.eval(e.arg, env, bufs)) & WORD
        raise SourceError(f"cannot evaluate {e!r}")


def _signed(v: int) -> int:
    return v - (1 << 64) if v & (1 << 63) else v


def _relation(rel: str, a: int, b: int) -> bool:
    if rel == "==":
        return a == b
    if rel == "!=":
        return a != b
    if rel == "u<":
        return a < b
    if rel == "u>=":
        return a >= b
    sa, sb = _signed(a), _signed(b)
    if rel == "<":
        return sa < sb
    if rel == "<=":
        return sa <= sb
    if rel == ">":
        return sa > sb
    if rel == ">=":
        return sa >= sb
    raise ValueError(rel)


def interpret(unit: SourceUnit, values: Dict[str, int],
              args: Tuple[int, ...] = (), func: str = "main",
              max_steps: int = 100_000) -> Tuple[int, Dict[int, int]]:
    """Run the reference interpreter; returns (result, global cell values)."""
    it = Interp(unit, values, max_steps)
    ret = it.run(func, args)
    gcells = {addr: it.memory.get(addr, 0) for addr in it.global_addrs.values()}
    return ret, gcells
