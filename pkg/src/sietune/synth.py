"""Indirection synthesis: {location, update} pairs realizing a value change.

An update is a short, total micro-op program executed inside a probe
handler with one formal parameter (the new source value).  Synthesis picks
among three shapes, by liveness of the expression's entry inputs at the
update point:

* no input overwritten inside the span: a single update after the span
  recomputes the target from live state with IV := a*newV + b;
* the target itself is the only dead input and the span's transform is
  algebraically invertible (add/sub/xor by known quantities, negation,
  multiplication by an odd constant): the update inverts the compiled
  transform to recover the entry value, then recomputes;
* otherwise dual-location: a capture probe at span entry saves the dead
  inputs to per-thread scratch, and the update past the span recomputes
  from scratch.

When the span's result is the flag word consumed by a conditional jump,
the probe would sit on the jump itself, which can never be
jump-optimized.  Planning then tries the branch rewrite: nudge the
compared register by (compiled IV - new IV) at an earlier jump-optimizable
site and restore it on both outgoing paths, synchronized by a task-local
flag.  If any of the three sites cannot be jump-optimized the plan falls
back to a single trap probe on the jump.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .minicc.build import BuildArtifact
from .mvm import isa
from .mvm.probes import (BREAKPOINT, BREAKPOINT_CYCLES, JUMP_OPTIMIZED,
                         JUMP_OPTIMIZED_CYCLES, UPDATE_CYCLES,
                         jump_opt_feasible)
from .span.cs import CriticalSpan
from .symx import expr as E
from .symx.fit import LinearMap


class SynthError(Exception):
    pass


class NonIntegralMap(SynthError):
    pass


class UnsupportedClobber(SynthError):
    pass


# indirection shapes
NO_OVERWRITE = "NoOverwrite"
REVERSIBLE = "ReversibleOverwrite"
DUAL_LOCATION = "DualLocation"
BRANCH_OPTIMIZED = "BranchOptimized"

# probe roles
PRIMARY = "Primary"
CAPTURE_BEFORE = "CaptureBefore"
RESTORE_AFTER = "RestoreAfter"
FALL_THROUGH_RESTORE = "FallThroughRestore"
BRANCH_TARGET_RESTORE = "BranchTargetRestore"


@dataclass(frozen=True)
class UpdateProgram:
    """Total, loop-free micro-op sequence over machine state.

    Ops:
        ("read", loc)                push the location's current value
        ("scratch_read", key)        push a per-thread scratch word
        ("scratch_save", key, loc)   save the location's value to scratch
        ("compute", tree)            push eval(tree); leaves may be
                                     ('tmp', i), ('newv',) or symx nodes
        ("write", target, i, tag)    write tmp i; tag: "version"|"preserve"
        ("write_flags", i)           write tmp i (a flag 4-tuple)
        ("set_flag", name) / ("clear_flag", name)
        ("if_flag", name)            stop unless the task-local flag is set
    """
    ops: Tuple[tuple, ...]

    def render(self) -> List[str]:
        out = []
        for op in self.ops:
            if op[0] == "compute":
                out.append(f"compute {_render_micro(op[1])}")
            elif op[0] == "read":
                out.append(f"read {_loc_str(op[1])}")
            elif op[0] == "write":
                out.append(f"write {_loc_str(op[1])} <- t{op[2]} [{op[3]}]")
            elif op[0] == "write_flags":
                out.append(f"write flags <- t{op[1]}")
            elif op[0] == "scratch_save":
                out.append(f"scratch[{op[1]}] <- {_loc_str(op[2])}")
            elif op[0] == "scratch_read":
                out.append(f"read scratch[{op[1]}]")
            else:
                out.append(" ".join(str(x) for x in op))
        return out


@dataclass
class Indirection:
    const_id: str
    cs: CriticalSpan
    case: str
    locations: Dict[str, int]            # role -> probe address
    updates: Dict[str, UpdateProgram]    # role -> update program
    probe_kinds: Dict[str, str] = field(default_factory=dict)
    adjust_reg: Optional[int] = None     # BranchOptimized: nudged register

    def modeled_cost(self) -> int:
        """Worst-case per-traversal cycles: every probe fires, every update runs."""
        total = 0
        for role in self.locations:
            kind = self.probe_kinds.get(role, BREAKPOINT)
            total += (JUMP_OPTIMIZED_CYCLES if kind == JUMP_OPTIMIZED
                      else BREAKPOINT_CYCLES)
            total += UPDATE_CYCLES
        return total

    def render(self) -> List[str]:
        out = [f"case={self.case}"]
        for role in sorted(self.locations):
            kind = self.probe_kinds.get(role, "?")
            out.append(f"{role}@{self.locations[role]:#x} [{kind}]")
            for line in self.updates.get(role, UpdateProgram(())).render():
                out.append(f"  {line}")
        return out


def _loc_str(loc: tuple) -> str:
    if loc[0] == "r":
        return f"r{loc[1]}"
    if loc[0] == "flags":
        return "flags"
    base = f"r{loc[1]}+" if loc[1] is not None else ""
    return f"[{base}{loc[2]}]"


def _render_micro(tree: tuple) -> str:
    if tree[0] == "tmp":
        return f"t{tree[1]}"
    if tree[0] == "newv":
        return "newV"
    if tree[0] in ("const", "sym", "ivhole"):
        return E.render(tree)
    if tree[0] == "cmp":
        return f"flags({_render_micro(tree[2])} {tree[1]} {_render_micro(tree[3])})"
    op = {"add": " + ", "mul": " * ", "and": " & ", "or": " | ", "xor": " ^ ",
          "shl": " << ", "shr": " >> "}.get(tree[0])
    return "(" + op.join(_render_micro(a) for a in tree[1:]) + ")"


def _map_tree(m: LinearMap) -> tuple:
    if not m.is_integral:
        raise NonIntegralMap(f"{m.render()} is not integral")
    return ("add", ("mul", ("const", int(m.a) & E.MASK), ("newv",)),
            ("const", int(m.b) & E.MASK))


def _subst(tree: tuple, mapping: Dict[tuple, tuple], iv_tree: tuple) -> tuple:
    if tree == E.IVHOLE:
        return iv_tree
    if tree[0] == "sym":
        return mapping[tree[1]]
    if tree[0] in ("const",):
        return tree
    if tree[0] == "cmp":
        return ("cmp", tree[1], _subst(tree[2], mapping, iv_tree),
                _subst(tree[3], mapping, iv_tree))
    if tree[0] in ("tmp", "newv"):
        return tree
    return (tree[0],) + tuple(_subst(a, mapping, iv_tree) for a in tree[1:])


def _written_locs(artifact: BuildArtifact, cs: CriticalSpan) -> Set[tuple]:
    """State locations written by any instruction inside the span."""
    out: Set[tuple] = set()
    program = artifact.program
    block = program.block_of(cs.start)
    for addr in block.addrs:
        if not (cs.start <= addr <= cs.end):
            continue
        ins = program.instr_at(addr)
        w = ins.reg_written()
        if w is not None:
            out.add(("r", w))
        if ins.writes_flags():
            out.add(("flags",))
        if ins.opcode == isa.STORE:
            m = ins.operands[0]
            if m[2] is None:
                out.add(("mem", m[1], m[3]))
    return out


def _invert(tree: tuple, wrt: tuple, cur: tuple) -> Optional[tuple]:
    """Solve tree == cur for sym(wrt); None when not invertible.

    Handles nests of addition, xor with hole-free siblings, and
    multiplication by odd constants (modular inverse in the 2^64 ring).
    """
    if tree == ("sym", wrt):
        return cur
    kind = tree[0]
    if kind == "add":
        args = list(tree[1:])
        carriers = [a for a in args if ("sym", wrt) in _subtrees(a)]
        if len(carriers) != 1:
            return None
        rest = [a for a in args if a is not carriers[0]]
        # cur - rest
        neg_rest = [("mul", ("const", E.MASK), r) for r in rest]
        return _invert(carriers[0], wrt, ("add", cur) + tuple(neg_rest))
    if kind == "xor":
        args = list(tree[1:])
        carriers = [a for a in args if ("sym", wrt) in _subtrees(a)]
        if len(carriers) != 1:
            return None
        rest = tuple(a for a in args if a is not carriers[0])
        return _invert(carriers[0], wrt, ("xor", cur) + rest)
    if kind == "mul":
        args = list(tree[1:])
        carriers = [a for a in args if ("sym", wrt) in _subtrees(a)]
        if len(carriers) != 1:
            return None
        rest = [a for a in args if a is not carriers[0]]
        coeff = 1
        for r in rest:
            if r[0] != "const":
                return None
            coeff = (coeff * r[1]) & E.MASK
        if coeff % 2 == 0:
            return None
        inv = pow(coeff, -1, 1 << 64)
        return _invert(carriers[0], wrt, ("mul", ("const", inv), cur))
    return None


def _subtrees(tree: tuple):
    yield tree
    if tree[0] in ("const", "sym", "ivhole", "tmp", "newv"):
        return
    start = 2 if tree[0] == "cmp" else 1
    for a in tree[start:]:
        if isinstance(a, tuple):
            yield from _subtrees(a)


def synthesize(cs: CriticalSpan, artifact: BuildArtifact) -> Indirection:
    """Build the update program(s) for one critical span."""
    if not cs.linear_map.is_integral:
        raise NonIntegralMap(cs.linear_map.render())
    expr = cs.expression.expr
    target = cs.expression.target
    inputs = sorted(E.symbols(expr))
    written = _written_locs(artifact, cs)
    dead = [loc for loc in inputs if loc in written]
    iv_tree = _map_tree(cs.linear_map)
    if cs.exit_addr is None:
        raise SynthError(f"span at {cs.start:#x} has no update point")

    scratch_prefix = f"{cs.const_id}:{cs.start:#x}"

    if not dead:
        case = NO_OVERWRITE
        ops: List[tuple] = []
        srcs: Dict[tuple, tuple] = {}
        for i, loc in enumerate(inputs):
            ops.append(("read", loc))
            srcs[loc] = ("tmp", i)
        tree = _subst(expr, srcs, iv_tree)
        n = len(inputs)
        if target == ("flags",):
            ops += [("compute", tree), ("write_flags", n)]
        else:
            ops += [("compute", tree), ("write", target, n, "version")]
        upd = UpdateProgram(tuple(ops))
        return Indirection(const_id=cs.const_id, cs=cs, case=case,
                           locations={PRIMARY: cs.exit_addr},
                           updates={PRIMARY: upd})

    if dead == [target] and target[0] == "r":
        concrete = E.rebuild(
            _subst(expr, {loc: ("sym", loc) for loc in inputs},
                   ("const", cs.expression.concrete_iv & E.MASK)),
            rewrite_shifts=True)
        inverse = _invert(concrete, target, ("tmp", 0))
        if inverse is not None:
            ops = [("read", target), ("compute", inverse)]
            srcs = {}
            tmp_i = 2
            for loc in inputs:
                if loc == target:
                    srcs[loc] = ("tmp", 1)   # recovered entry value
                else:
                    ops.append(("read", loc))
                    srcs[loc] = ("tmp", tmp_i)
                    tmp_i += 1
            ops += [("compute", _subst(expr, srcs, iv_tree)),
                    ("write", target, tmp_i, "version")]
            upd = UpdateProgram(tuple(ops))
            return Indirection(const_id=cs.const_id, cs=cs, case=REVERSIBLE,
                               locations={PRIMARY: cs.exit_addr},
                               updates={PRIMARY: upd})

    # dual-location: capture dead inputs at span entry, recompute after
    for loc in dead:
        if loc[0] == "mem" and loc[1] is not None and ("r", loc[1]) in written:
            raise UnsupportedClobber(
                f"slot base r{loc[1]} clobbered inside the span")
    if target[0] == "mem" and target[1] is not None \
            and ("r", target[1]) in written:
        raise UnsupportedClobber(
            f"target address base r{target[1]} clobbered inside the span")
    cap_ops: List[tuple] = []
    srcs = {}
    keys = {}
    for loc in dead:
        key = f"{scratch_prefix}:{_loc_str(loc)}"
        keys[loc] = key
        cap_ops.append(("scratch_save", key, loc))
    ops = []
    tmp_i = 0
    for loc in inputs:
        if loc in keys:
            ops.append(("scratch_read", keys[loc]))
        else:
            ops.append(("read", loc))
        srcs[loc] = ("tmp", tmp_i)
        tmp_i += 1
    tree = _subst(expr, srcs, iv_tree)
    if target == ("flags",):
        ops += [("compute", tree), ("write_flags", tmp_i)]
    else:
        ops += [("compute", tree), ("write", target, tmp_i, "version")]
    return Indirection(const_id=cs.const_id, cs=cs, case=DUAL_LOCATION,
                       locations={CAPTURE_BEFORE: cs.start,
                                  RESTORE_AFTER: cs.exit_addr},
                       updates={CAPTURE_BEFORE: UpdateProgram(tuple(cap_ops)),
                                RESTORE_AFTER: UpdateProgram(tuple(ops))})


# -- probe planning --------------------------------------------------------------


def plan_probes(ind: Indirection, artifact: BuildArtifact,
                allow_branch_opt: bool = True) -> Indirection:
    """Choose probe kinds, rewriting branch-consumed spans when profitable."""
    program = artifact.program
    cs = ind.cs
    primary_role = PRIMARY if PRIMARY in ind.locations else RESTORE_AFTER
    primary_addr = ind.locations[primary_role]
    primary_ins = program.instr_at(primary_addr)

    if (allow_branch_opt and cs.expression.target == ("flags",)
            and primary_ins is not None
            and primary_ins.opcode in isa.CONDITIONAL_JUMPS):
        rewritten = _plan_branch_optimized(ind, artifact, primary_ins)
        if rewritten is not None:
            return rewritten

    for role, addr in ind.locations.items():
        ind.probe_kinds[role] = (JUMP_OPTIMIZED if jump_opt_feasible(program, addr)
                                 else BREAKPOINT)
    return ind


def _cmp_operand_reg(artifact: BuildArtifact, cs: CriticalSpan) -> Optional[int]:
    ins = artifact.program.instr_at(cs.end)
    if ins is None or ins.opcode != isa.CMP:
        return None
    a, b = ins.operands
    if isa.is_reg(a) and isa.is_imm(b):
        return a[1]
    return None


def _touches(ins, reg: int) -> bool:
    return reg in ins.regs_read() or ins.reg_written() == reg


def _plan_branch_optimized(ind: Indirection, artifact: BuildArtifact,
                           jcc) -> Optional[Indirection]:
    program = artifact.program
    cs = ind.cs
    reg = _cmp_operand_reg(artifact, cs)
    if reg is None:
        return None
    block = program.block_of(cs.end)

    # adjust site: after the compared register's last write, before the CMP,
    # jump-optimizable, with nothing touching the register in between
    last_def = None
    for addr in block.addrs:
        if addr >= cs.end:
            break
        if program.instr_at(addr).reg_written() == reg:
            last_def = addr
    candidates = [a for a in block.addrs
                  if (last_def is None or a > last_def) and a < cs.end]
    adjust_site = None
    for a in reversed(candidates):
        if not jump_opt_feasible(program, a):
            continue
        between = [x for x in candidates if x > a]
        if any(_touches(program.instr_at(x), reg) for x in between):
            continue
        adjust_site = a
        break
    if adjust_site is None:
        return None

    fall_through = jcc.end
    fall_site = _restore_site(program, fall_through, reg)
    target_site = _restore_site(program, jcc.jump_target(), reg)
    if fall_site is None or target_site is None or fall_site == target_site:
        return None

    flag = f"{cs.const_id}:{cs.start:#x}:branch"
    dkey = f"{cs.const_id}:{cs.start:#x}:delta"
    iv_c = ("const", cs.expression.concrete_iv & E.MASK)
    delta = ("add", iv_c, ("mul", ("const", E.MASK), _map_tree(cs.linear_map)))
    primary = UpdateProgram((
        ("compute", delta),                      # t0 = IV - IV'
        ("read", ("r", reg)),                    # t1
        ("compute", ("add", ("tmp", 0), ("tmp", 1))),
        ("write", ("r", reg), 2, "preserve"),
        ("scratch_write", dkey, 0),
        ("set_flag", flag),
    ))
    restore = UpdateProgram((
        ("if_flag", flag),
        ("scratch_read", dkey),                  # t0 = delta
        ("read", ("r", reg)),                    # t1
        ("compute", ("add", ("tmp", 1), ("mul", ("const", E.MASK), ("tmp", 0)))),
        ("write", ("r", reg), 2, "preserve"),
        ("clear_flag", flag),
    ))
    out = Indirection(
        const_id=ind.const_id, cs=cs, case=BRANCH_OPTIMIZED,
        locations={PRIMARY: adjust_site, FALL_THROUGH_RESTORE: fall_site,
                   BRANCH_TARGET_RESTORE: target_site},
        updates={PRIMARY: primary, FALL_THROUGH_RESTORE: restore,
                 BRANCH_TARGET_RESTORE: restore},
        adjust_reg=reg)
    for role, addr in out.locations.items():
        out.probe_kinds[role] = JUMP_OPTIMIZED   # feasibility checked above
    return out


def _restore_site(program, start: int, reg: int) -> Optional[int]:
    """First jump-optimizable address at or after ``start`` in its block,
    with no access to ``reg`` before it."""
    addr = start
    block = program.block_of(start)
    if block is None:
        return None
    while addr is not None and program.block_of(addr) is block:
        ins = program.instr_at(addr)
        if jump_opt_feasible(program, addr):
            return addr
        if _touches(ins, reg) or ins.is_control():
            return None
        addr = program.next_addr(addr)
    return None


# -- update execution ------------------------------------------------------------

class UpdateContext:
    """Adapter the policy runtime supplies when an update fires."""

    def __init__(self, probe_ctx, new_v: int, tag):
        self.ctx = probe_ctx
        self.new_v = new_v & E.MASK
        self.tag = tag

    @property
    def thread(self):
        return self.ctx.thread


def execute_update(upd: UpdateProgram, uc: UpdateContext) -> bool:
    """Run the micro-ops; returns False when gated off by a task-local flag.

    Charges the fixed per-update cycle cost to the world.
    """
    ctx = uc.ctx
    thread = ctx.thread
    tmps: List[int] = []

    def read_loc(loc: tuple) -> int:
        if loc[0] == "r":
            return ctx.read_reg(loc[1])
        if loc[0] == "flags":
            raise SynthError("flags are not a readable update input")
        base = ctx.read_reg(loc[1]) if loc[1] is not None else 0
        return ctx.read_mem(base + loc[2])

    def eval_tree(tree: tuple):
        kind = tree[0]
        if kind == "tmp":
            return tmps[tree[1]]
        if kind == "newv":
            return uc.new_v
        if kind == "const":
            return tree[1]
        if kind == "cmp":
            return isa.compare_flags(eval_tree(tree[2]), eval_tree(tree[3]))
        if kind == "add":
            acc = 0
            for a in tree[1:]:
                acc += eval_tree(a)
            return acc & E.MASK
        if kind == "mul":
            acc = 1
            for a in tree[1:]:
                acc = (acc * eval_tree(a)) & E.MASK
            return acc
        if kind == "and":
            acc = E.MASK
            for a in tree[1:]:
                acc &= eval_tree(a)
            return acc
        if kind == "or":
            acc = 0
            for a in tree[1:]:
                acc |= eval_tree(a)
            return acc
        if kind == "xor":
            acc = 0
            for a in tree[1:]:
                acc ^= eval_tree(a)
            return acc
        if kind == "shl":
            return (eval_tree(tree[1]) << (eval_tree(tree[2]) & 63)) & E.MASK
        if kind == "shr":
            return eval_tree(tree[1]) >> (eval_tree(tree[2]) & 63)
        raise SynthError(f"bad micro node {tree!r}")

    charged = False
    for op in upd.ops:
        kind = op[0]
        if kind == "if_flag":
            if not thread.local_flags.get(op[1], False):
                return False
            continue
        if not charged:
            ctx.world.charge_update()
            charged = True
        if kind == "read":
            tmps.append(read_loc(op[1]))
        elif kind == "scratch_read":
            tmps.append(thread.scratch.get(op[1], 0))
        elif kind == "scratch_save":
            thread.scratch[op[1]] = read_loc(op[2])
        elif kind == "scratch_write":
            thread.scratch[op[1]] = tmps[op[2]]
        elif kind == "compute":
            tmps.append(eval_tree(op[1]))
        elif kind == "write":
            _, target, i, tag_mode = op
            tag = uc.tag if tag_mode == "version" else "preserve"
            if target[0] == "mem":
                base = ctx.read_reg(target[1]) if target[1] is not None else 0
                ctx.write_state(("m", (base + target[2]) & E.MASK), tmps[i], tag)
            else:
                ctx.write_state(target, tmps[i], tag)
        elif kind == "write_flags":
            ctx.write_state(("flags",), tmps[op[1]], uc.tag)
        elif kind == "set_flag":
            thread.local_flags[op[1]] = True
        elif kind == "clear_flag":
            thread.local_flags[op[1]] = False
        else:
            raise SynthError(f"bad micro op {op!r}")
    return True
