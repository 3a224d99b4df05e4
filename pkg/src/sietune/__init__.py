"""sietune: runtime tuning of compiled-in performance constants.

The pipeline turns a build-time numeric constant into a runtime-tunable
knob without recompiling: diff two builds to find the instructions that
carry the constant, recover the symbolic relation between machine state
and the constant's transformed immediate, scope that relation into
critical and safe spans, synthesize probe-driven state updates, and
transition values safely across running threads.  Everything runs over a
deterministic mini virtual machine and a toy optimizing lowerer.
"""

__version__ = "0.1.0"
