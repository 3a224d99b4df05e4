"""Deterministic mini virtual machine: the stand-in for a running kernel.

Submodules:
    isa      instruction set, operands, flags
    program  Program container, basic blocks, text assembly
    machine  machine state and single-instruction semantics with taint
    probes   attachable pre-handler probes and the two-tier cost model
    world    seeded multi-thread scheduler, traces, handler contexts
"""

from .isa import (ADD, AND, CALL, CMP, CONDITIONAL_JUMPS, JAE, JB, JE, JG,
                  JGE, JL, JLE, JMP, JNE, LEA, LOAD, MOV, MUL, NEG, NOP, OR,
                  RET, SHL, SHR, STORE, SUB, XOR, Instruction, WORD_MASK,
                  imm, mem, reg, to_s64, to_u64)
from .machine import (HALTED, RUNNABLE, InvalidAddress, DivergentControl,
                      MachineState, MvmError, TaintTag, ThreadContext,
                      execute_instruction, make_thread, stack_snapshot)
from .probes import (BREAKPOINT, BREAKPOINT_CYCLES, INSTRUCTION_UNIT_COST,
                     JUMP_OPTIMIZED, JUMP_OPTIMIZED_CYCLES, MIN_JUMP_OPT_BYTES,
                     OptimizationInfeasible, Probe, ProbeConflict, ProbeError,
                     ProbeSet, UPDATE_CYCLES, jump_opt_feasible)
from .program import Block, Function, Program, ProgramError, assemble, parse_asm
from .world import (IllegalContext, ProbeContext, ProbeRouter,
                    StepLimitExceeded, Trace, World, execute_span, run_threads)

__all__ = [name for name in dir() if not name.startswith("_")]
