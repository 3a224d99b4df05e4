"""From seed clusters to symbolic state expressions.

Within the seed's basic block, the relevant instruction set grows backward
(producers of operands the cluster reads) and forward (instructions that
read-modify-write a location the cluster already writes) until stable.
Executing just that set symbolically over an entry-symbolic state yields,
per written location, the relation between block-entry state, the
transformed immediate, and the final value.

Because a compiler may express one source constant as either a shift
amount or a folded multiplier, every derivation carries two canonical
branches: one with shifts rewritten to multiplication, one with shifts
preserved.  Branches that cannot later sustain a linear relation against
the source value are discarded downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from ..minicc.build import BuildArtifact
from ..mvm import isa
from ..mvm.isa import Instruction
from ..mvm.machine import MachineState, execute_instruction
from ..seeddiff import SeedCluster, SeedSet
from . import expr as E


class SymxError(Exception):
    pass


class NonConvergent(SymxError):
    """No stable single-block expression: const untunable at this site."""


class MultiTarget(SymxError):
    def __init__(self, msg, expressions):
        super().__init__(msg)
        self.expressions = expressions


class StructureMismatch(SymxError):
    pass


REGIMES = ("rewrite", "preserve")


@dataclass
class StateExpression:
    """Relation target <- f(entry state, IV) recovered for one cluster."""
    target: tuple                      # ('r', i) | ('flags',) | ('mem', base, disp)
    expr: tuple                        # canonical tree; IV holes after matching
    concrete_iv: Optional[int] = None
    branches: Dict[str, tuple] = field(default_factory=dict)
    cluster: Optional[SeedCluster] = None
    contributors: Tuple[int, ...] = ()  # cluster instruction addresses, ordered
    function: str = ""

    def render(self) -> str:
        t = self.target
        if t[0] == "r":
            tgt = f"r{t[1]}"
        elif t[0] == "flags":
            tgt = "flags"
        else:
            base = f"r{t[1]}+" if t[1] is not None else ""
            tgt = f"[{base}{t[2]}]"
        return f"{tgt} <- {E.render(self.expr)}"


class _SymState:
    """Symbolic machine state over block-entry symbols."""

    def __init__(self):
        self.regs: Dict[int, tuple] = {}
        self.mem: Dict[tuple, tuple] = {}
        self.flags: Optional[tuple] = None   # ('cmp', None, lhs, rhs)

    def reg(self, i: int) -> tuple:
        return self.regs.get(i, E.sym(("r", i)))

    def slot_key(self, op: tuple) -> Optional[tuple]:
        """('mem', base, disp) when the address is entry-sp/absolute syntactic."""
        _, base, index, scale, disp = op
        if index is not None:
            return None
        if base is None:
            return ("mem", None, disp)
        if self.reg(base) == E.sym(("r", base)):
            return ("mem", base, disp)
        return None

    def read(self, op: tuple) -> Optional[tuple]:
        if isa.is_reg(op):
            return self.reg(op[1])
        if isa.is_imm(op):
            return E.const(op[1])
        key = self.slot_key(op)
        if key is None:
            return None
        return self.mem.get(key, E.sym(key))


def _exec_symbolic(instrs: Sequence[Instruction]) -> _SymState:
    st = _SymState()
    for ins in instrs:
        op = ins.opcode
        ops = ins.operands
        if op in (isa.MOV, isa.LOAD):
            v = st.read(ops[1])
            if v is None:
                raise NonConvergent(f"{ins!r}: unresolvable memory operand")
            st.regs[ops[0][1]] = v
        elif op == isa.LEA:
            _, base, index, scale, disp = ops[1]
            terms = [E.const(disp)]
            if base is not None:
                terms.append(st.reg(base))
            if index is not None:
                terms.append(E.mul(E.const(scale), st.reg(index)))
            st.regs[ops[0][1]] = E.add(*terms)
        elif op == isa.STORE:
            key = st.slot_key(ops[0])
            if key is None:
                raise NonConvergent(f"{ins!r}: unresolvable store address")
            v = st.read(ops[1])
            if v is None:
                raise NonConvergent(f"{ins!r}: unresolvable store operand")
            st.mem[key] = v
        elif op in isa.ALU_OPS:
            dst = ops[0][1]
            a = st.reg(dst)
            b = st.read(ops[1])
            if b is None:
                raise NonConvergent(f"{ins!r}: unresolvable operand")
            st.regs[dst] = _apply_alu(op, a, b)
        elif op == isa.NEG:
            dst = ops[0][1]
            st.regs[dst] = E.neg(st.reg(dst))
        elif op == isa.CMP:
            a, b = st.read(ops[0]), st.read(ops[1])
            if a is None or b is None:
                raise NonConvergent(f"{ins!r}: unresolvable compare operand")
            st.flags = E.cmp_expr(None, a, b)
        else:
            raise NonConvergent(f"{ins!r}: control flow inside a cluster")
    return st


def _apply_alu(op: str, a: tuple, b: tuple) -> tuple:
    if op == isa.ADD:
        return E.add(a, b)
    if op == isa.SUB:
        return E.sub(a, b)
    if op == isa.MUL:
        return E.mul(a, b)
    if op == isa.SHL:
        return ("shl", a, b)   # regime applied at rebuild time
    if op == isa.SHR:
        return E.shr(a, b)
    if op == isa.AND:
        return E.band(a, b)
    if op == isa.OR:
        return E.bor(a, b)
    if op == isa.XOR:
        return E.bxor(a, b)
    raise SymxError(op)


def _materialization_step(ins: Instruction, loc: int) -> bool:
    """True for read-modify-write steps that can only carry the const:
    the destination is also the sole register input and any other operand
    is an immediate (chain steps, merged masks, literal multiplies)."""
    if ins.reg_written() != loc or loc not in ins.regs_read():
        return False
    if not (ins.opcode in isa.ALU_OPS or ins.opcode in (isa.NEG, isa.LEA)):
        return False
    return all(r == loc for r in ins.regs_read())


def _closure(artifact: BuildArtifact, cluster: SeedCluster) -> List[Instruction]:
    return _closure_of(artifact, cluster.block_start, cluster.seed_addresses,
                       cluster.const_id)


def _closure_of(artifact: BuildArtifact, block_start: int,
                seed_addresses, cid: str) -> List[Instruction]:
    """Backward/forward-stable relevant set within the block.

    Backward expansion is confined to the const's own candidate site
    ranges: producers from unrelated statements are block-entry state, not
    part of the materialization.  Forward expansion absorbs only
    materialization-shaped read-modify-write steps; an instruction that
    mixes in another live register is a consumer and ends the span.
    """
    program = artifact.program
    block = program.block_of(block_start)
    fn = program.function_of(block_start)
    instrs = [program.instr_at(a) for a in block.addrs]
    index_of = {ins.address: i for i, ins in enumerate(instrs)}
    selected: Set[int] = set()
    for a in seed_addresses:
        if a not in index_of:
            raise SymxError(f"seed {a:#x} outside block {block.start:#x}")
        selected.add(index_of[a])

    def producers(i: int) -> Set[int]:
        out = set()
        ins = instrs[i]
        for r in ins.regs_read():
            if r == 15:   # frame pointer is block-entry state, not a producer
                continue
            for j in range(i - 1, -1, -1):
                if instrs[j].reg_written() == r:
                    if artifact.in_const_sites(cid, fn, instrs[j].address):
                        out.add(j)
                    break
        # syntactic store-to-load matching for memory reads
        if ins.opcode == isa.LOAD:
            op = ins.operands[1]
            for j in range(i - 1, -1, -1):
                pj = instrs[j]
                if pj.opcode == isa.STORE and pj.operands[0] == op:
                    if artifact.in_const_sites(cid, fn, pj.address):
                        out.add(j)
                    break
        return out

    changed = True
    while changed:
        changed = False
        for i in sorted(selected):
            for j in producers(i):
                if j not in selected:
                    selected.add(j)
                    changed = True
        # forward: materialization-shaped continuations of written registers
        written: Set[int] = set()
        for i in range(len(instrs)):
            ins = instrs[i]
            if i in selected:
                w = ins.reg_written()
                if w is not None:
                    written.add(w)
                continue
            w = ins.reg_written()
            if w is not None and w in written and _materialization_step(ins, w):
                selected.add(i)
                changed = True
            elif w is not None and w in written:
                written.discard(w)   # overwrite or consumption ends the chain

    # the gap-neighbour seed rule can pull in a downstream register copy; a
    # MOV whose destination nothing in the cluster reads is a consumer of
    # the relation, not part of it -- unless its source is overwritten later
    # inside the cluster, in which case the copy is the value's only carrier
    while True:
        pruned = False
        for i in sorted(selected, reverse=True):
            ins = instrs[i]
            if ins.opcode != isa.MOV or not isa.is_reg(ins.operands[1]):
                continue
            dst = ins.reg_written()
            src = ins.operands[1][1]
            read_later = any(dst in instrs[j].regs_read()
                             for j in selected if j != i)
            written_by_others = any(instrs[j].reg_written() == dst
                                    for j in selected if j != i)
            src_rewritten = any(instrs[j].reg_written() == src
                                for j in selected if j > i)
            if not read_later and not written_by_others and not src_rewritten:
                selected.discard(i)
                pruned = True
                break
        if not pruned or not selected:
            break
    if not selected:
        raise NonConvergent("cluster reduced to nothing after pruning")
    return [instrs[i] for i in sorted(selected)]


def occurrence_clusters(artifact: BuildArtifact,
                        cluster: SeedCluster) -> List[SeedCluster]:
    """Split a block-level cluster into per-occurrence clusters.

    Two seeds belong to one occurrence when their relevant sets share an
    instruction (one materialization spread over several instructions);
    independent materializations that merely share a block split apart.
    """
    closures = {}
    for a in cluster.seed_addresses:
        closures[a] = {ins.address for ins in _closure_of(
            artifact, cluster.block_start, (a,), cluster.const_id)}
    groups: List[Set[int]] = []
    for a in sorted(closures):
        merged = None
        for g in groups:
            if any(closures[a] & closures[b] for b in g):
                g.add(a)
                merged = g
                break
        if merged is None:
            groups.append({a})
    # transitive re-merge
    changed = True
    while changed:
        changed = False
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if any(closures[a] & closures[b]
                       for a in groups[i] for b in groups[j]):
                    groups[i] |= groups[j]
                    del groups[j]
                    changed = True
                    break
            if changed:
                break
    groups.sort(key=min)
    return [SeedCluster(const_id=cluster.const_id, function=cluster.function,
                        block_start=cluster.block_start,
                        seed_addresses=tuple(sorted(g))) for g in groups]


def _consuming_relation(artifact: BuildArtifact, block_start: int,
                        after: int) -> Optional[str]:
    """Relation of the first conditional jump at/after ``after`` in the block."""
    block = artifact.program.block_of(block_start)
    for a in block.addrs:
        if a < after:
            continue
        ins = artifact.program.instr_at(a)
        if ins.opcode in isa.CONDITIONAL_JUMPS:
            return ins.opcode
        if ins.writes_flags() and a > after:
            return None
    return None


def derive_expressions(artifact: BuildArtifact,
                       cluster: SeedCluster) -> List[StateExpression]:
    """All state expressions (one per written target) for a seed cluster."""
    instrs = _closure(artifact, cluster)
    if not instrs:
        raise NonConvergent("empty cluster")
    st = _exec_symbolic(instrs)

    out: List[StateExpression] = []
    contributors = tuple(i.address for i in instrs)
    fn = artifact.program.function_of(cluster.block_start) or ""

    def push(target: tuple, raw: tuple):
        branches = {}
        for regime in REGIMES:
            tree = E.rebuild(raw, rewrite_shifts=(regime == "rewrite"))
            branches[regime] = tree
        primary = branches["rewrite"]
        if not E.has_const(primary):
            return   # no constant slot: cannot carry the transformed value
        out.append(StateExpression(target=target, expr=primary,
                                   branches=branches, cluster=cluster,
                                   contributors=contributors, function=fn))

    for r, raw in sorted(st.regs.items()):
        if raw == E.sym(("r", r)):
            continue
        push(("r", r), raw)
    for key, raw in sorted(st.mem.items(), key=lambda kv: repr(kv[0])):
        push(key, raw)
    if st.flags is not None:
        last_flag_write = max((i.address for i in instrs if i.writes_flags()),
                              default=None)
        rel = _consuming_relation(artifact, cluster.block_start, last_flag_write)
        if rel is not None:
            push(("flags",), ("cmp", rel, st.flags[2], st.flags[3]))

    if not out:
        raise NonConvergent(
            f"cluster at {cluster.block_start:#x}: no expressible target")
    return out


def derive_expression(artifact: BuildArtifact, seeds: SeedSet,
                      cluster: SeedCluster) -> StateExpression:
    """The cluster's single state expression; MultiTarget carries them all."""
    exprs = derive_expressions(artifact, cluster)
    if len(exprs) > 1:
        raise MultiTarget(
            f"cluster at {cluster.block_start:#x} writes {len(exprs)} targets",
            exprs)
    return exprs[0]


# -- validation against concrete execution --------------------------------------

def validate_expression(artifact: BuildArtifact, se: StateExpression,
                        samples: int = 100, seed: int = 0) -> None:
    """Check expr against concrete execution of the cluster instructions.

    Raises SymxError on the first disagreement; exact 64-bit comparison.
    """
    import random
    rng = random.Random(seed)
    program = artifact.program
    instrs = [program.instr_at(a) for a in se.contributors]
    tree = se.expr
    if se.concrete_iv is not None:
        iv = se.concrete_iv
    else:
        iv = None
        tree = se.branches.get("rewrite", se.expr)

    for n in range(samples):
        st = MachineState(pc=se.contributors[0])
        for i in range(14):
            st.regs[i] = rng.getrandbits(64)
        st.regs[15] = 0x100000
        env = {("r", i): st.regs[i] for i in range(16)}
        # pre-seed any memory slots the expression reads
        for loc in E.symbols(tree):
            if loc[0] == "mem":
                addr = (st.regs[loc[1]] if loc[1] is not None else 0) + loc[2]
                val = rng.getrandbits(64)
                st.write_mem(addr, val)
                env[loc] = val
        for ins in instrs:
            st.pc = ins.address
            execute_instruction(program, st, ins)
        got = _read_target(st, se.target)
        want = E.evaluate(tree, env, iv=iv)
        if se.target[0] == "flags":
            want = tuple(want)
            got = tuple(got)
        if got != want:
            raise SymxError(
                f"symbolic/concrete disagreement at sample {n}: "
                f"{se.render()}: got {got}, expected {want}")


def _read_target(st: MachineState, target: tuple):
    if target[0] == "r":
        return st.regs[target[1]]
    if target[0] == "flags":
        return tuple(st.flags)
    base = st.regs[target[1]] if target[1] is not None else 0
    return st.read_mem(base + target[2])
