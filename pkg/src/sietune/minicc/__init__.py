"""Toy optimizing lowerer from an annotated source IR to MVM programs."""

from .ast import (CATEGORIES, Assign, AugAssign, Bin, Branch, BufDecl,
                  CallStmt, FuncDef, Goto, LabelStmt, LoadStmt, Neg, Num,
                  PerfConstSpec, PerfRef, Return, SourceError, SourceUnit,
                  StoreStmt, Var, parse_source)
from .build import (ALL_PASSES, DEFAULT_NOISE_SEED, DEFAULT_PASSES,
                    BuildArtifact, build, build_from_text, normalize_passes)
from .codegen import CHAIN_STEPS, GLOBAL_BASE, DebugRange
from .interp import interpret
from .passes import UnknownConst, UnsupportedStatement

__all__ = [name for name in dir() if not name.startswith("_")]
