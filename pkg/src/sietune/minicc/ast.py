"""Source IR: a tiny statement language with inline perf-const annotations.

One statement per line.  A perf-const is written inline where an integer
literal would appear::

    #! categories: Threshold, ScalingFactor
    unit demo
    global G

    fn main(x):
        t = x * (2 * @perfconst(id=SCALE2X, cat=ScalingFactor) 5)
        t += 3
        if t > 10 goto done
        r = call helper(t)
    done:
        return t

Statement forms: assignment (plain and compound ``+= -= *= ^= <<= >>= &=``),
``NAME = load [addr]``, ``store [addr], value``, compare-and-branch
``if a REL b goto L`` (REL in ``== != < <= > >= u< u>=``), ``goto L``,
labels, calls (statement-level only), ``return``, and ``buf NAME SIZE``
frame-buffer declarations.  ``global NAME`` declares a unit-level memory
cell; the bare name evaluates to its address.  Loops are written with
labels and conditional branches.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

CATEGORIES = ("Threshold", "Interval", "BatchSize", "ScalingFactor")


class SourceError(Exception):
    pass


# -- expressions ---------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: int
    cids: frozenset = frozenset()   # perf-const provenance through folding


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class PerfRef:
    """A perf-const token; replaced by a provenance-tagged Num at build time."""
    const_id: str


@dataclass(frozen=True)
class Bin:
    op: str                       # + - * << >> & | ^
    lhs: object
    rhs: object


@dataclass(frozen=True)
class Neg:
    arg: object


# -- statements ----------------------------------------------------------------

@dataclass
class Stmt:
    line: int = 0


@dataclass
class Assign(Stmt):
    name: str = ""
    expr: object = None


@dataclass
class AugAssign(Stmt):
    name: str = ""
    op: str = "+"
    expr: object = None


@dataclass
class LoadStmt(Stmt):
    name: str = ""
    addr: object = None


@dataclass
class StoreStmt(Stmt):
    addr: object = None
    value: object = None


@dataclass
class Branch(Stmt):
    lhs: object = None
    rel: str = "=="
    rhs: object = None
    label: str = ""


@dataclass
class Goto(Stmt):
    label: str = ""


@dataclass
class LabelStmt(Stmt):
    name: str = ""


@dataclass
class CallStmt(Stmt):
    dest: Optional[str] = None
    func: str = ""
    args: List[object] = field(default_factory=list)


@dataclass
class Return(Stmt):
    expr: object = None


@dataclass
class BufDecl(Stmt):
    name: str = ""
    size: int = 1


@dataclass
class FuncDef:
    name: str
    params: List[str]
    body: List[Stmt]
    inline: bool = False
    line: int = 0


@dataclass(frozen=True)
class PerfConstSpec:
    const_id: str
    loc: Tuple[str, int, int]      # (unit name, line, token index)
    value_v: int
    category: str


@dataclass
class SourceUnit:
    name: str
    functions: List[FuncDef]
    const_tokens: List[PerfConstSpec]
    globals: List[str] = field(default_factory=list)
    expected_categories: List[str] = field(default_factory=list)

    def function(self, name: str) -> FuncDef:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def const(self, const_id: str) -> PerfConstSpec:
        for c in self.const_tokens:
            if c.const_id == const_id:
                return c
        raise KeyError(const_id)


# -- lexer ---------------------------------------------------------------------

_PERF_RE = (r"@perfconst\(\s*id\s*=\s*(?P<pid>\w+)\s*,\s*cat\s*=\s*(?P<pcat>\w+)\s*\)"
            r"\s*(?P<pval>-?(?:0x[0-9a-fA-F]+|\d+))")
_TOKEN_RE = re.compile(
    rf"(?P<perf>{_PERF_RE})"
    r"|(?P<num>-?(?:0x[0-9a-fA-F]+|\d+))"
    r"|(?P<op>u<|u>=|<<=|>>=|==|!=|<=|>=|<<|>>|\+=|-=|\*=|\^=|&=|[-+*()\[\],:=<>&|^])"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<ws>\s+)")


@dataclass
class Token:
    kind: str
    text: str
    index: int      # token index within the statement line


def tokenize(line: str, lineno: int) -> List[Token]:
    out: List[Token] = []
    pos = 0
    idx = 0
    while pos < len(line):
        m = _TOKEN_RE.match(line, pos)
        if not m:
            raise SourceError(f"line {lineno}: cannot tokenize at {line[pos:]!r}")
        pos = m.end()
        if m.lastgroup == "ws":
            continue
        out.append(Token(m.lastgroup, m.group(0), idx))
        idx += 1
    return out


class _ExprParser:
    """Precedence-climbing parser over a token list."""

    LEVELS = [["|"], ["^"], ["&"], ["<<", ">>"], ["+", "-"], ["*"]]

    def __init__(self, tokens: List[Token], lineno: int, unit: "_UnitBuilder"):
        self.toks = tokens
        self.i = 0
        self.lineno = lineno
        self.unit = unit

    def peek(self) -> Optional[Token]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self) -> Token:
        t = self.peek()
        if t is None:
            raise SourceError(f"line {self.lineno}: unexpected end of expression")
        self.i += 1
        return t

    def expect(self, text: str):
        t = self.take()
        if t.text != text:
            raise SourceError(f"line {self.lineno}: expected {text!r}, got {t.text!r}")

    def parse(self) -> object:
        e = self._level(0)
        if self.peek() is not None:
            raise SourceError(
                f"line {self.lineno}: trailing tokens after expression: "
                f"{' '.join(t.text for t in self.toks[self.i:])}")
        return e

    def _level(self, lvl: int) -> object:
        if lvl == len(self.LEVELS):
            return self._unary()
        e = self._level(lvl + 1)
        while True:
            t = self.peek()
            if t is None or t.text not in self.LEVELS[lvl]:
                return e
            self.take()
            rhs = self._level(lvl + 1)
            e = Bin(t.text, e, rhs)

    def _unary(self) -> object:
        t = self.peek()
        if t is not None and t.text == "-":
            self.take()
            return Neg(self._unary())
        return self._atom()

    def _atom(self) -> object:
        t = self.take()
        if t.kind == "perf":
            m = re.match(_PERF_RE, t.text)
            return self.unit.add_const(m.group("pid"), m.group("pcat"),
                                       _int(m.group("pval")), self.lineno, t.index)
        if t.kind == "num":
            return Num(_int(t.text))
        if t.kind == "name":
            return Var(t.text)
        if t.text == "(":
            e = self._level(0)
            self.expect(")")
            return e
        raise SourceError(f"line {self.lineno}: unexpected token {t.text!r}")


def _int(text: str) -> int:
    neg = text.startswith("-")
    if neg:
        text = text[1:]
    v = int(text, 16) if text.lower().startswith("0x") else int(text, 10)
    return -v if neg else v


# -- statement parser ----------------------------------------------------------

_FN_RE = re.compile(r"^(inline\s+)?fn\s+(\w+)\s*\(([^)]*)\)\s*:?\s*$")
_LABEL_RE = re.compile(r"^(\w+)\s*:\s*$")
_RELS = ("u<", "u>=", "==", "!=", "<=", ">=", "<", ">")
_AUG_OPS = {"+=": "+", "-=": "-", "*=": "*", "^=": "^",
            "<<=": "<<", ">>=": ">>", "&=": "&"}
_KEYWORDS = {"fn", "inline", "global", "unit", "buf", "store", "load",
             "call", "return", "if", "goto"}


class _UnitBuilder:
    def __init__(self, name: str):
        self.name = name
        self.consts: Dict[str, PerfConstSpec] = {}

    def add_const(self, cid: str, cat: str, value: int, line: int, tok_idx: int) -> PerfRef:
        if cat not in CATEGORIES:
            raise SourceError(f"line {line}: unknown category {cat!r}")
        if cid in self.consts:
            raise SourceError(
                f"line {line}: const {cid!r} annotated more than once "
                f"(first at line {self.consts[cid].loc[1]})")
        self.consts[cid] = PerfConstSpec(cid, (self.name, line, tok_idx), value, cat)
        return PerfRef(cid)


def parse_source(text: str, default_name: str = "unit") -> SourceUnit:
    unit_name = default_name
    expected: List[str] = []
    globals_: List[str] = []
    functions: List[FuncDef] = []
    builder = _UnitBuilder(unit_name)
    cur: Optional[FuncDef] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#!"):
            m = re.match(r"#!\s*categories\s*:\s*(.*)$", line)
            if m:
                expected = [c.strip() for c in m.group(1).split(",") if c.strip()]
            continue
        if not line or line.startswith("#"):
            continue

        m = _FN_RE.match(line)
        if m:
            params = [p.strip() for p in m.group(3).split(",") if p.strip()]
            if len(params) > 6:
                raise SourceError(f"line {lineno}: too many parameters (max 6)")
            cur = FuncDef(name=m.group(2), params=params, body=[],
                          inline=bool(m.group(1)), line=lineno)
            functions.append(cur)
            continue

        first = line.split(None, 1)[0]
        if first == "unit":
            unit_name = line.split(None, 1)[1].strip()
            builder.name = unit_name
            continue
        if first == "global":
            globals_.append(line.split(None, 1)[1].strip())
            continue

        if cur is None:
            raise SourceError(f"line {lineno}: statement outside any function")
        cur.body.append(_parse_stmt(line, lineno, builder))

    unit = SourceUnit(name=unit_name, functions=functions,
                      const_tokens=list(builder.consts.values()),
                      globals=globals_, expected_categories=expected)
    _validate(unit)
    return unit


def _parse_stmt(line: str, lineno: int, builder: _UnitBuilder) -> Stmt:
    m = _LABEL_RE.match(line)
    if m and m.group(1) not in _KEYWORDS:
        return LabelStmt(line=lineno, name=m.group(1))

    toks = tokenize(line, lineno)
    texts = [t.text for t in toks]
    head = texts[0]

    def expr_from(i: int, j: Optional[int] = None) -> object:
        sub = toks[i:j]
        return _ExprParser(sub, lineno, builder).parse()

    if head == "buf":
        if len(toks) != 3 or toks[1].kind != "name" or toks[2].kind != "num":
            raise SourceError(f"line {lineno}: expected 'buf NAME SIZE'")
        return BufDecl(line=lineno, name=toks[1].text, size=_int(toks[2].text))

    if head == "goto":
        return Goto(line=lineno, label=texts[1])

    if head == "return":
        return Return(line=lineno, expr=expr_from(1) if len(toks) > 1 else None)

    if head == "if":
        # find the relation at depth 0, then 'goto LABEL' at the tail
        if texts[-2] != "goto":
            raise SourceError(f"line {lineno}: 'if' must end with 'goto LABEL'")
        depth = 0
        rel_i = None
        for i, t in enumerate(toks[1:-2], start=1):
            if t.text == "(":
                depth += 1
            elif t.text == ")":
                depth -= 1
            elif depth == 0 and t.text in _RELS:
                rel_i = i
                break
        if rel_i is None:
            raise SourceError(f"line {lineno}: no relation in 'if'")
        return Branch(line=lineno, lhs=expr_from(1, rel_i), rel=texts[rel_i],
                      rhs=expr_from(rel_i + 1, len(toks) - 2), label=texts[-1])

    if head == "store":
        # store [addr], value
        if texts[1] != "[":
            raise SourceError(f"line {lineno}: expected 'store [addr], value'")
        close = _matching_bracket(texts, 1, lineno)
        if texts[close + 1] != ",":
            raise SourceError(f"line {lineno}: expected ',' after address")
        return StoreStmt(line=lineno, addr=expr_from(2, close),
                         value=expr_from(close + 2))

    if head == "call":
        func, args = _parse_call(toks, 1, lineno, builder)
        return CallStmt(line=lineno, dest=None, func=func, args=args)

    # NAME = ... | NAME op= ...
    if toks[0].kind == "name" and len(toks) >= 2:
        op = texts[1]
        if op in _AUG_OPS:
            return AugAssign(line=lineno, name=head, op=_AUG_OPS[op],
                             expr=expr_from(2))
        if op == "=":
            if len(texts) > 2 and texts[2] == "load":
                if texts[3] != "[":
                    raise SourceError(f"line {lineno}: expected 'load [addr]'")
                close = _matching_bracket(texts, 3, lineno)
                if close != len(toks) - 1:
                    raise SourceError(f"line {lineno}: trailing tokens after load")
                return LoadStmt(line=lineno, name=head, addr=expr_from(4, close))
            if len(texts) > 2 and texts[2] == "call":
                func, args = _parse_call(toks, 3, lineno, builder)
                return CallStmt(line=lineno, dest=head, func=func, args=args)
            return Assign(line=lineno, name=head, expr=expr_from(2))

    raise SourceError(f"line {lineno}: cannot parse statement {line!r}")


def _matching_bracket(texts: List[str], open_i: int, lineno: int) -> int:
    depth = 0
    for i in range(open_i, len(texts)):
        if texts[i] == "[":
            depth += 1
        elif texts[i] == "]":
            depth -= 1
            if depth == 0:
                return i
    raise SourceError(f"line {lineno}: unbalanced brackets")


def _parse_call(toks: List[Token], i: int, lineno: int,
                builder: _UnitBuilder) -> Tuple[str, List[object]]:
    texts = [t.text for t in toks]
    if toks[i].kind != "name" or texts[i + 1] != "(":
        raise SourceError(f"line {lineno}: expected 'call NAME(...)'")
    func = texts[i]
    # split top-level commas inside the parens
    depth = 0
    args: List[object] = []
    start = i + 2
    for j in range(i + 1, len(toks)):
        t = texts[j]
        if t in ("(", "["):
            depth += 1
        elif t in (")", "]"):
            depth -= 1
            if depth == 0:
                if j > start:
                    args.append(_ExprParser(toks[start:j], lineno, builder).parse())
                if j != len(toks) - 1:
                    raise SourceError(f"line {lineno}: trailing tokens after call")
                return func, args
        elif t == "," and depth == 1:
            args.append(_ExprParser(toks[start:j], lineno, builder).parse())
            start = j + 1
    raise SourceError(f"line {lineno}: unbalanced call parentheses")


def _validate(unit: SourceUnit):
    names = [f.name for f in unit.functions]
    if len(set(names)) != len(names):
        raise SourceError("duplicate function names")
    for f in unit.functions:
        labels = {s.name for s in f.body if isinstance(s, LabelStmt)}
        for s in f.body:
            if isinstance(s, (Branch, Goto)) and s.label not in labels:
                raise SourceError(
                    f"line {s.line}: unknown label {s.label!r} in {f.name}")
        if f.inline:
            for i, s in enumerate(f.body):
                if isinstance(s, Return) and i != len(f.body) - 1:
                    raise SourceError(
                        f"inline fn {f.name!r}: return must be the last statement")
                if isinstance(s, (LabelStmt, Goto, Branch, CallStmt)):
                    raise SourceError(
                        f"inline fn {f.name!r}: only straight-line bodies supported")
