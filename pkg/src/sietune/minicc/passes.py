"""AST-level optimization passes: inlining, folding, propagation, DCE.

All passes preserve the reference-interpreter semantics of the unit.
Perf-const provenance rides along on Num nodes: folding two Nums unions
their ``cids``, so after constant folding and propagation the surviving
literals still know which consts shaped them.
"""

from __future__ import annotations

import copy
from typing import Dict, List, Optional, Set

from .ast import (Assign, AugAssign, Bin, Branch, BufDecl, CallStmt, FuncDef,
                  Goto, LabelStmt, LoadStmt, Neg, Num, PerfRef, Return,
                  SourceError, SourceUnit, StoreStmt, Var)

WORD = (1 << 64) - 1


class UnknownConst(SourceError):
    pass


class UnsupportedStatement(SourceError):
    pass


def substitute_consts(unit: SourceUnit, values: Dict[str, int]) -> SourceUnit:
    """Deep-copy the unit with PerfRef leaves replaced by tagged Nums."""
    known = {c.const_id for c in unit.const_tokens}
    for cid in values:
        if cid not in known:
            raise UnknownConst(f"no perf-const {cid!r} in unit {unit.name!r}")
    out = copy.deepcopy(unit)

    def sub(e):
        if isinstance(e, PerfRef):
            return Num(values[e.const_id] & WORD, frozenset({e.const_id}))
        if isinstance(e, Bin):
            return Bin(e.op, sub(e.lhs), sub(e.rhs))
        if isinstance(e, Neg):
            return Neg(sub(e.arg))
        return e

    for f in out.functions:
        for s in f.body:
            _map_exprs(s, sub)
    return out


def _map_exprs(s, fn):
    if isinstance(s, Assign):
        s.expr = fn(s.expr)
    elif isinstance(s, AugAssign):
        s.expr = fn(s.expr)
    elif isinstance(s, LoadStmt):
        s.addr = fn(s.addr)
    elif isinstance(s, StoreStmt):
        s.addr = fn(s.addr)
        s.value = fn(s.value)
    elif isinstance(s, Branch):
        s.lhs = fn(s.lhs)
        s.rhs = fn(s.rhs)
    elif isinstance(s, CallStmt):
        s.args = [fn(a) for a in s.args]
    elif isinstance(s, Return) and s.expr is not None:
        s.expr = fn(s.expr)


def inline_functions(unit: SourceUnit) -> SourceUnit:
    """Splice inline-fn bodies at their call sites, renaming locals."""
    out = copy.deepcopy(unit)
    inlines = {f.name: f for f in out.functions if f.inline}
    if not inlines:
        return out
    counter = [0]

    def expand(body: List) -> List:
        new: List = []
        for s in body:
            if isinstance(s, CallStmt) and s.func in inlines:
                callee = inlines[s.func]
                if len(s.args) != len(callee.params):
                    raise UnsupportedStatement(
                        f"line {s.line}: arity mismatch inlining {s.func}")
                n = counter[0]
                counter[0] += 1
                rename = {p: f"__inl{n}_{p}" for p in callee.params}
                for st in callee.body:
                    for nm in _local_defs(st):
                        rename.setdefault(nm, f"__inl{n}_{nm}")
                for p, a in zip(callee.params, s.args):
                    new.append(Assign(line=s.line, name=rename[p], expr=a))
                for st in callee.body:
                    st2 = copy.deepcopy(st)
                    _rename_stmt(st2, rename)
                    if isinstance(st2, Return):
                        if s.dest is not None:
                            new.append(Assign(line=st2.line, name=s.dest,
                                              expr=st2.expr if st2.expr is not None
                                              else Num(0)))
                    else:
                        new.append(st2)
                continue
            new.append(s)
        return new

    for f in out.functions:
        if not f.inline:
            f.body = expand(f.body)
    out.functions = [f for f in out.functions if not f.inline]
    return out


def _local_defs(s) -> List[str]:
    if isinstance(s, (Assign, AugAssign, LoadStmt)):
        return [s.name]
    if isinstance(s, CallStmt) and s.dest:
        return [s.dest]
    if isinstance(s, BufDecl):
        return [s.name]
    return []


def _rename_stmt(s, rename: Dict[str, str]):
    def r(e):
        if isinstance(e, Var) and e.name in rename:
            return Var(rename[e.name])
        if isinstance(e, Bin):
            return Bin(e.op, r(e.lhs), r(e.rhs))
        if isinstance(e, Neg):
            return Neg(r(e.arg))
        return e

    _map_exprs(s, r)
    if isinstance(s, (Assign, AugAssign, LoadStmt)) and s.name in rename:
        s.name = rename[s.name]
    if isinstance(s, CallStmt) and s.dest in rename:
        s.dest = rename[s.dest]
    if isinstance(s, BufDecl) and s.name in rename:
        s.name = rename[s.name]


def _eval_bin(op: str, a: int, b: int) -> int:
    if op == "+":
        return (a + b) & WORD
    if op == "-":
        return (a - b) & WORD
    if op == "*":
        return (a * b) & WORD
    if op == "<<":
        return (a << (b & 63)) & WORD
    if op == ">>":
        return (a >> (b & 63)) & WORD
    if op == "&":
        return a & b
    if op == "|":
        return a | b
    if op == "^":
        return a ^ b
    raise ValueError(op)


def fold_expr(e):
    if isinstance(e, Bin):
        l, r = fold_expr(e.lhs), fold_expr(e.rhs)
        if isinstance(l, Num) and isinstance(r, Num):
            return Num(_eval_bin(e.op, l.value, r.value), l.cids | r.cids)
        return Bin(e.op, l, r)
    if isinstance(e, Neg):
        a = fold_expr(e.arg)
        if isinstance(a, Num):
            return Num((-a.value) & WORD, a.cids)
        return Neg(a)
    return e


def fold_constants(unit: SourceUnit) -> SourceUnit:
    for f in unit.functions:
        for s in f.body:
            _map_exprs(s, fold_expr)
    return unit


def propagate_constants(unit: SourceUnit) -> SourceUnit:
    """Substitute single-assignment locals bound to literals into their uses.

    Only locals assigned exactly once in the whole function (and never
    compound-assigned or load-assigned) are propagated; that makes the
    rewrite valid across labels and loops without a dataflow analysis.
    """
    for f in unit.functions:
        assigns: Dict[str, int] = {}
        values: Dict[str, Num] = {}
        killed: Set[str] = set(f.params)
        for s in f.body:
            for nm in _local_defs(s):
                assigns[nm] = assigns.get(nm, 0) + 1
                if not (isinstance(s, Assign) and isinstance(s.expr, Num)):
                    killed.add(nm)
                elif isinstance(s, Assign):
                    values[nm] = s.expr
        subst = {nm: v for nm, v in values.items()
                 if assigns.get(nm) == 1 and nm not in killed}
        if not subst:
            continue

        def r(e):
            if isinstance(e, Var) and e.name in subst:
                n = subst[e.name]
                return Num(n.value, n.cids)
            if isinstance(e, Bin):
                return Bin(e.op, r(e.lhs), r(e.rhs))
            if isinstance(e, Neg):
                return Neg(r(e.arg))
            return e

        for s in f.body:
            _map_exprs(s, r)
    return unit


def _reads_of(s) -> Set[str]:
    out: Set[str] = set()

    def walk(e):
        if isinstance(e, Var):
            out.add(e.name)
        elif isinstance(e, Bin):
            walk(e.lhs)
            walk(e.rhs)
        elif isinstance(e, Neg):
            walk(e.arg)

    if isinstance(s, Assign):
        walk(s.expr)
    elif isinstance(s, AugAssign):
        out.add(s.name)
        walk(s.expr)
    elif isinstance(s, LoadStmt):
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


def eliminate_dead_assignments(unit: SourceUnit) -> SourceUnit:
    """Drop plain assignments to locals that are never read anywhere."""
    for f in unit.functions:
        while True:
            read: Set[str] = set()
            for s in f.body:
                read |= _reads_of(s)
            new_body = []
            changed = False
            for s in f.body:
                if (isinstance(s, Assign) and s.name not in read
                        and isinstance(s.expr, (Num, Var))):
                    changed = True
                    continue
                new_body.append(s)
            f.body = new_body
            if not changed:
                break
    return unit
