"""Symbolic expression trees over machine state at block entry.

Trees are plain nested tuples, built through canonicalizing constructors:
constants fold (64-bit wrap), commutative operand lists flatten and sort,
``x - y`` becomes ``x + (-1)*y``, and (in the rewrite regime) shifts by a
constant become multiplication by a power of two.  Structural equality of
canonical trees is plain tuple equality.

Node forms::

    ('const', v)              v canonical in [0, 2^64)
    ('sym', loc)              state location at block entry; loc is
                              ('r', i), ('flags',), or ('mem', base, disp)
    ('ivhole',)               the distinguished transformed-value hole
    ('add', args...)          n-ary, sorted
    ('mul', args...)          n-ary, sorted
    ('and'|'or'|'xor', args...)
    ('shl'|'shr', a, b)
    ('cmp', rel, lhs, rhs)    comparison feeding the flag word
"""

from __future__ import annotations

from itertools import permutations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from ..mvm import isa

MASK = (1 << 64) - 1

IVHOLE = ("ivhole",)


class ExprError(Exception):
    pass


def const(v: int) -> tuple:
    return ("const", v & MASK)


def sym(loc: tuple) -> tuple:
    return ("sym", loc)


def is_const(e: tuple) -> bool:
    return e[0] == "const"


_KIND_RANK = {"const": 0, "ivhole": 1, "sym": 2, "add": 3, "mul": 4,
              "and": 5, "or": 6, "xor": 7, "shl": 8, "shr": 9, "cmp": 10}


def _key(e: tuple):
    return (_KIND_RANK[e[0]],) + tuple(
        _key(a) if isinstance(a, tuple) and a and a[0] in _KIND_RANK else a
        for a in e[1:])


def _flatten(kind: str, args: Iterable[tuple]) -> List[tuple]:
    out: List[tuple] = []
    for a in args:
        if a[0] == kind:
            out.extend(a[1:])
        else:
            out.append(a)
    return out


def add(*args: tuple) -> tuple:
    terms = _flatten("add", args)
    csum = 0
    coeffs: Dict[tuple, int] = {}
    order: List[tuple] = []
    for t in terms:
        if is_const(t):
            csum = (csum + t[1]) & MASK
            continue
        coeff, core = _split_coeff(t)
        if core not in coeffs:
            coeffs[core] = 0
            order.append(core)
        coeffs[core] = (coeffs[core] + coeff) & MASK
    rest = []
    for core in order:
        c = coeffs[core]
        if c == 0:
            continue
        rest.append(core if c == 1 else mul(const(c), core))
    if csum:
        rest.append(const(csum))
    if not rest:
        return const(0)
    if len(rest) == 1:
        return rest[0]
    rest.sort(key=_key)
    return ("add",) + tuple(rest)


def _split_coeff(t: tuple) -> Tuple[int, tuple]:
    """Split a term into (constant coefficient, symbolic core)."""
    if t[0] != "mul":
        return 1, t
    coeff = 1
    core = []
    for f in t[1:]:
        if is_const(f):
            coeff = (coeff * f[1]) & MASK
        else:
            core.append(f)
    if not core:
        return coeff, const(1)
    if len(core) == 1:
        return coeff, core[0]
    core.sort(key=_key)
    return coeff, ("mul",) + tuple(core)


def mul(*args: tuple) -> tuple:
    factors = _flatten("mul", args)
    cprod = 1
    rest = []
    for f in factors:
        if is_const(f):
            cprod = (cprod * f[1]) & MASK
        else:
            rest.append(f)
    if cprod == 0:
        return const(0)
    if cprod != 1 or not rest:
        rest.append(const(cprod))
    if len(rest) == 1:
        return rest[0]
    rest.sort(key=_key)
    return ("mul",) + tuple(rest)


def neg(a: tuple) -> tuple:
    return mul(const(MASK), a)   # -1 in two's complement


def sub(a: tuple, b: tuple) -> tuple:
    return add(a, neg(b))


def shl(a: tuple, b: tuple, rewrite: bool = True) -> tuple:
    if is_const(a) and is_const(b):
        return const(a[1] << (b[1] & 63))
    if is_const(b) and rewrite:
        return mul(const(1 << (b[1] & 63)), a)
    return ("shl", a, b)


def shr(a: tuple, b: tuple) -> tuple:
    if is_const(a) and is_const(b):
        return const(a[1] >> (b[1] & 63))
    return ("shr", a, b)


def _bitop(kind: str, ident: int, args: Sequence[tuple]) -> tuple:
    terms = _flatten(kind, args)
    acc = ident
    rest: List[tuple] = []
    for t in terms:
        if is_const(t):
            if kind == "and":
                acc &= t[1]
            elif kind == "or":
                acc |= t[1]
            else:
                acc ^= t[1]
        else:
            rest.append(t)
    if kind == "xor":
        # pairs cancel
        rest.sort(key=_key)
        pruned: List[tuple] = []
        for t in rest:
            if pruned and pruned[-1] == t:
                pruned.pop()
            else:
                pruned.append(t)
        rest = pruned
    if kind == "and" and acc == 0:
        return const(0)
    if kind == "or" and acc == MASK:
        return const(MASK)
    if not ((kind == "and" and acc == MASK) or (kind in ("or", "xor") and acc == 0)):
        rest.append(const(acc))
    if not rest:
        return const(ident)
    if len(rest) == 1:
        return rest[0]
    rest.sort(key=_key)
    return (kind,) + tuple(rest)


def band(*args: tuple) -> tuple:
    return _bitop("and", MASK, args)


def bor(*args: tuple) -> tuple:
    return _bitop("or", 0, args)


def bxor(*args: tuple) -> tuple:
    return _bitop("xor", 0, args)


def cmp_expr(rel: Optional[str], lhs: tuple, rhs: tuple) -> tuple:
    return ("cmp", rel, lhs, rhs)


def rebuild(e: tuple, rewrite_shifts: bool) -> tuple:
    """Re-canonicalize a tree under the given shift regime."""
    kind = e[0]
    if kind in ("const", "sym", "ivhole"):
        return e
    if kind == "add":
        return add(*(rebuild(a, rewrite_shifts) for a in e[1:]))
    if kind == "mul":
        return mul(*(rebuild(a, rewrite_shifts) for a in e[1:]))
    if kind in ("and", "or", "xor"):
        return _bitop(kind, {"and": MASK, "or": 0, "xor": 0}[kind],
                      [rebuild(a, rewrite_shifts) for a in e[1:]])
    if kind == "shl":
        return shl(rebuild(e[1], rewrite_shifts), rebuild(e[2], rewrite_shifts),
                   rewrite=rewrite_shifts)
    if kind == "shr":
        return shr(rebuild(e[1], rewrite_shifts), rebuild(e[2], rewrite_shifts))
    if kind == "cmp":
        return ("cmp", e[1], rebuild(e[2], rewrite_shifts),
                rebuild(e[3], rewrite_shifts))
    raise ExprError(f"bad node {e!r}")


def evaluate(e: tuple, env: Dict[tuple, int], iv: Optional[int] = None):
    """Evaluate a tree; ('cmp', ...) yields the four-flag tuple."""
    kind = e[0]
    if kind == "const":
        return e[1]
    if kind == "ivhole":
        if iv is None:
            raise ExprError("expression has an unbound IV hole")
        return iv & MASK
    if kind == "sym":
        return env[e[1]] & MASK
    if kind == "add":
        acc = 0
        for a in e[1:]:
            acc += evaluate(a, env, iv)
        return acc & MASK
    if kind == "mul":
        acc = 1
        for a in e[1:]:
            acc = (acc * evaluate(a, env, iv)) & MASK
        return acc
    if kind == "and":
        acc = MASK
        for a in e[1:]:
            acc &= evaluate(a, env, iv)
        return acc
    if kind == "or":
        acc = 0
        for a in e[1:]:
            acc |= evaluate(a, env, iv)
        return acc
    if kind == "xor":
        acc = 0
        for a in e[1:]:
            acc ^= evaluate(a, env, iv)
        return acc
    if kind == "shl":
        return (evaluate(e[1], env, iv) << (evaluate(e[2], env, iv) & 63)) & MASK
    if kind == "shr":
        return evaluate(e[1], env, iv) >> (evaluate(e[2], env, iv) & 63)
    if kind == "cmp":
        return isa.compare_flags(evaluate(e[2], env, iv), evaluate(e[3], env, iv))
    raise ExprError(f"bad node {e!r}")


def symbols(e: tuple) -> set:
    if e[0] == "sym":
        return {e[1]}
    if e[0] in ("const", "ivhole"):
        return set()
    start = 2 if e[0] == "cmp" else 1
    out = set()
    for a in e[start:]:
        if isinstance(a, tuple):
            out |= symbols(a)
    return out


def has_const(e: tuple) -> bool:
    if e[0] == "const":
        return True
    if e[0] in ("sym", "ivhole"):
        return False
    start = 2 if e[0] == "cmp" else 1
    return any(has_const(a) for a in e[start:] if isinstance(a, tuple))


def render(e: tuple) -> str:
    kind = e[0]
    if kind == "const":
        return str(isa.to_s64(e[1]))
    if kind == "ivhole":
        return "IV"
    if kind == "sym":
        loc = e[1]
        if loc[0] == "r":
            return f"@entry(r{loc[1]})"
        if loc[0] == "flags":
            return "@entry(flags)"
        base = f"r{loc[1]}+" if loc[1] is not None else ""
        return f"@entry([{base}{loc[2]}])"
    if kind in ("add", "mul", "and", "or", "xor"):
        op = {"add": " + ", "mul": " * ", "and": " & ", "or": " | ",
              "xor": " ^ "}[kind]
        return "(" + op.join(render(a) for a in e[1:]) + ")"
    if kind == "shl":
        return f"({render(e[1])} << {render(e[2])})"
    if kind == "shr":
        return f"({render(e[1])} >> {render(e[2])})"
    if kind == "cmp":
        return f"flags({render(e[2])} {e[1] or '?'} {render(e[3])})"
    raise ExprError(f"bad node {e!r}")


# -- structural matching -------------------------------------------------------

_COMMUTATIVE = {"add", "mul", "and", "or", "xor"}


def unify(a: tuple, b: tuple, allow_hole: bool = False,
          path: tuple = ()) -> Optional[List[Tuple[tuple, Optional[int], int]]]:
    """Match two trees, tolerating differing constant leaves.

    Returns a list of (path_in_a, const_a, const_b) triples at positions
    where the trees carry different constants, or None when the shapes
    cannot be reconciled.  With ``allow_hole``, an ('ivhole',) in ``a``
    matches any constant in ``b`` and reports (path, None, const_b).
    """
    if allow_hole and a == IVHOLE:
        if b[0] != "const":
            return None
        return [(path, None, b[1])]
    if a[0] == "const" and b[0] == "const":
        return [] if a[1] == b[1] else [(path, a[1], b[1])]
    if a[0] != b[0]:
        return None
    kind = a[0]
    if kind in ("sym", "ivhole"):
        return [] if a == b else None
    if kind == "cmp":
        if a[1] != b[1]:
            return None
        return _unify_seq([a[2], a[3]], [b[2], b[3]], False, allow_hole,
                          path, offset=2)
    args_a, args_b = list(a[1:]), list(b[1:])
    if len(args_a) != len(args_b):
        return None
    return _unify_seq(args_a, args_b, kind in _COMMUTATIVE, allow_hole,
                      path, offset=1)


def _unify_seq(xs: List[tuple], ys: List[tuple], commutative: bool,
               allow_hole: bool, path: tuple, offset: int
               ) -> Optional[List[Tuple[tuple, Optional[int], int]]]:
    if not commutative or len(xs) <= 1:
        out: List[Tuple[tuple, Optional[int], int]] = []
        for i, (x, y) in enumerate(zip(xs, ys)):
            m = unify(x, y, allow_hole, path + (i + offset,))
            if m is None:
                return None
            out.extend(m)
        return out
    if len(xs) > 5:
        return None   # canonical trees in this pipeline stay small
    best = None
    for perm in permutations(range(len(ys))):
        out = []
        ok = True
        for i, j in enumerate(perm):
            m = unify(xs[i], ys[j], allow_hole, path + (i + offset,))
            if m is None:
                ok = False
                break
            out.extend(m)
        if ok and (best is None or len(out) < len(best)):
            best = out
            if not best:
                return best
    return best


def hole_at_paths(a: tuple, paths: set, path: tuple = ()) -> tuple:
    """Replace the const leaves at the given paths with the IV hole."""
    if path in paths:
        return IVHOLE
    if a[0] in ("const", "sym", "ivhole"):
        return a
    if a[0] == "cmp":
        return ("cmp", a[1],
                hole_at_paths(a[2], paths, path + (2,)),
                hole_at_paths(a[3], paths, path + (3,)))
    return (a[0],) + tuple(hole_at_paths(x, paths, path + (i + 1,))
                           for i, x in enumerate(a[1:]))


def extract_iv(holed: tuple, concrete: tuple) -> Optional[int]:
    """Given a tree with IV holes and a concrete tree, read the IV value."""
    pairs = unify(holed, concrete, allow_hole=True)
    if pairs is None:
        return None
    vals = {b for _, a, b in pairs if a is None}
    if len(vals) != 1:
        return None
    if any(a is not None for _, a, b in pairs):
        return None   # non-hole constants must agree exactly
    return vals.pop()
