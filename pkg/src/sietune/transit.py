"""Safe value transitions over running threads.

Per-thread mode: a monitor at each safe-span entry checks, by stack
inspection, that no outer frame of the entering thread sits inside any of
the const's spans; if clean, that thread switches immediately, otherwise
the check retries at its next span entry.

Global mode: one stop-world scan seeds a reference count of resident
(thread, span) pairs; thereafter entry monitors increment and exit
monitors decrement (at most once per residency, so loops that re-cross an
entry cannot inflate the count and exits never drive it below zero).
When the count reaches zero no thread's pc or stack lies inside any span,
the phase flips to Done, and all monitors detach.

Immediate mode skips safety entirely and is meant for tests and offline
experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .mvm.machine import RUNNABLE, ThreadContext, stack_snapshot
from .mvm.world import ProbeRouter, World
from .span.ss import SafeSpan

IMMEDIATE = "Immediate"
PER_THREAD = "PerThread"
GLOBAL = "Global"
MODES = (IMMEDIATE, PER_THREAD, GLOBAL)

IDLE = "Idle"
TRANSITIONING = "Transitioning"
DONE = "Done"


class TransitError(Exception):
    pass


class AlreadyTransitioning(TransitError):
    pass


@dataclass
class TimelineEvent:
    quantum: int
    event: str          # init | enter | exit | done
    thread_id: int      # -1 for world-wide events
    refcount: int

    def render(self) -> str:
        return f"({self.quantum}, {self.event}, {self.thread_id}, {self.refcount})"


def pc_inside_for_refcount(span: SafeSpan, pc: int, program) -> bool:
    """Residency as the reference count sees it.

    Sitting exactly on the entry is not yet inside (the entry monitor has
    not fired); sitting exactly on an exit is still inside (the exit
    monitor has not fired).
    """
    if pc == span.entry:
        return False
    if pc in span.exits:
        return True
    fn = program.function_of(pc)
    hull = span.hulls.get(fn)
    return hull is not None and hull[0] <= pc <= hull[1]


def frame_inside(span: SafeSpan, ret_addr: int, program) -> bool:
    adj = ret_addr - 1          # lands within the call instruction
    fn = program.function_of(adj)
    hull = span.hulls.get(fn)
    return hull is not None and hull[0] <= adj <= hull[1]


def thread_resident_spans(spans: List[SafeSpan], thread: ThreadContext,
                          program) -> Set[int]:
    """Indices of spans this thread occupies (pc or any stack frame)."""
    out: Set[int] = set()
    frames = stack_snapshot(thread)
    for i, span in enumerate(spans):
        if pc_inside_for_refcount(span, frames[0], program):
            out.add(i)
            continue
        if any(frame_inside(span, ra, program) for ra in frames[1:]):
            out.add(i)
    return out


def occupied(spans: List[SafeSpan], thread: ThreadContext, program) -> bool:
    """Strict occupancy: pc or any frame inside span member intervals.

    A thread parked exactly on an entry has consumed nothing yet and
    counts as outside; exit addresses sit outside the member hulls.
    """
    frames = stack_snapshot(thread)
    pc = frames[0]
    for span in spans:
        fn = program.function_of(pc)
        hull = span.hulls.get(fn)
        if hull is not None and hull[0] <= pc <= hull[1] and pc != span.entry:
            return True
        if any(frame_inside(span, ra, program) for ra in frames[1:]):
            return True
    return False


def occupancy_scan(spans: List[SafeSpan], threads, program) -> List[int]:
    """Thread ids whose pc or stack lies strictly inside the spans."""
    return [tid for tid in sorted(threads)
            if occupied(spans, threads[tid], program)]


@dataclass
class TransitionState:
    const_id: str
    mode: str
    pending_value: int
    spans: List[SafeSpan]
    phase: str = IDLE
    global_refcount: int = 0
    per_thread_done: Dict[int, bool] = field(default_factory=dict)
    monitors: List[int] = field(default_factory=list)
    timeline: List[TimelineEvent] = field(default_factory=list)
    done_quantum: Optional[int] = None
    done_scan: Optional[List[int]] = None
    _residency: Dict[Tuple[int, int], bool] = field(default_factory=dict)
    _monitor_keys: List[tuple] = field(default_factory=list)
    _router: Optional[ProbeRouter] = None
    _world: Optional[World] = None

    def render_timeline(self) -> str:
        return "\n".join(ev.render() for ev in self.timeline)


def begin_transition(const_id: str, spans: List[SafeSpan], mode: str,
                     new_value: int, world: World,
                     router: Optional[ProbeRouter] = None,
                     active: Optional[Dict[str, "TransitionState"]] = None
                     ) -> TransitionState:
    """Install monitors and (in Global mode) seed the residency count.

    ``active`` is the caller's registry of in-flight transitions, used to
    enforce one transition per const.
    """
    if mode not in MODES:
        raise TransitError(f"unknown mode {mode!r}")
    if active is not None and const_id in active and \
            active[const_id].phase == TRANSITIONING:
        raise AlreadyTransitioning(const_id)
    router = router or ProbeRouter(world)
    st = TransitionState(const_id=const_id, mode=mode,
                         pending_value=new_value, spans=spans)
    st._router = router
    st._world = world

    if mode == IMMEDIATE:
        st.phase = DONE
        st.done_quantum = world.quantum
        st.timeline.append(TimelineEvent(world.quantum, "init", -1, 0))
        st.timeline.append(TimelineEvent(world.quantum, "done", -1, 0))
        return st

    if mode == PER_THREAD:
        st.phase = TRANSITIONING
        st.per_thread_done = {tid: False for tid in world.threads}
        st.timeline.append(TimelineEvent(world.quantum, "init", -1,
                                         len(world.threads)))
        # a halted thread can never consume anything again
        for tid, t in world.threads.items():
            if t.status != RUNNABLE:
                st.per_thread_done[tid] = True
        if _all_done(st):
            _finish(st)
        else:
            _attach_monitors(st, entries_only=True)
        return st

    # Global: single stop-world scan over every thread's pc and stack
    st.phase = TRANSITIONING
    count = 0
    for tid, thread in world.threads.items():
        if thread.status != RUNNABLE:
            continue
        for i in thread_resident_spans(spans, thread, world.program):
            st._residency[(tid, i)] = True
            count += 1
    st.global_refcount = count
    st.timeline.append(TimelineEvent(world.quantum, "init", -1, count))
    if count == 0:
        _finish(st)
        return st
    _attach_monitors(st, entries_only=False)
    return st


def _attach_monitors(st: TransitionState, entries_only: bool):
    for i, span in enumerate(st.spans):
        key = st._router.add(span.entry,
                             _entry_handler(st, i))
        st._monitor_keys.append(key)
        st.monitors.append(span.entry)
        if entries_only:
            continue
        for e in span.exits:
            key = st._router.add(e, _exit_handler(st, i))
            st._monitor_keys.append(key)
            st.monitors.append(e)


def _entry_handler(st: TransitionState, span_idx: int):
    def handler(ctx):
        on_ss_entry(ctx.thread, st, span_idx, ctx.world)
    return handler


def _exit_handler(st: TransitionState, span_idx: int):
    def handler(ctx):
        on_ss_exit(ctx.thread, st, span_idx, ctx.world)
    return handler


def on_ss_entry(thread: ThreadContext, st: TransitionState, span_idx: int,
                world: World):
    if st.phase != TRANSITIONING:
        return
    tid = thread.thread_id
    if st.mode == PER_THREAD:
        if st.per_thread_done.get(tid):
            return
        frames = stack_snapshot(thread)
        for span in st.spans:
            if any(frame_inside(span, ra, world.program) for ra in frames[1:]):
                return   # deep inside another span: retry at the next entry
        st.per_thread_done[tid] = True
        st.timeline.append(TimelineEvent(
            world.quantum, "enter", tid,
            sum(1 for v in st.per_thread_done.values() if v)))
        if _all_done(st):
            _finish(st)
        return
    # Global: count each (thread, span) residency once
    if st._residency.get((tid, span_idx)):
        return
    st._residency[(tid, span_idx)] = True
    st.global_refcount += 1
    st.timeline.append(TimelineEvent(world.quantum, "enter", tid,
                                     st.global_refcount))


def on_ss_exit(thread: ThreadContext, st: TransitionState, span_idx: int,
               world: World):
    if st.phase != TRANSITIONING or st.mode != GLOBAL:
        return
    tid = thread.thread_id
    if not st._residency.get((tid, span_idx)):
        return   # dec-if-positive: never below zero, never double-counted
    st._residency[(tid, span_idx)] = False
    st.global_refcount -= 1
    st.timeline.append(TimelineEvent(world.quantum, "exit", tid,
                                     st.global_refcount))
    if st.global_refcount == 0:
        _finish(st)


def _all_done(st: TransitionState) -> bool:
    world = st._world
    return all(done or world.threads[tid].status != RUNNABLE
               for tid, done in st.per_thread_done.items())


def poll_completion(st: TransitionState):
    """Re-check completion after thread exits (per-thread mode only)."""
    if st.phase == TRANSITIONING and st.mode == PER_THREAD and _all_done(st):
        _finish(st)


def _finish(st: TransitionState):
    st.phase = DONE
    world = st._world
    st.done_quantum = world.quantum
    st.done_scan = occupancy_scan(st.spans, world.threads, world.program)
    for key in st._monitor_keys:
        st._router.remove(key)
    st._monitor_keys.clear()
    st.timeline.append(TimelineEvent(world.quantum, "done", -1,
                                     st.global_refcount))


def transition_done(st: TransitionState,
                    thread: Optional[ThreadContext] = None) -> bool:
    """Pure query: may the new value be applied (for this thread)?"""
    if st.phase == DONE:
        return True
    if st.mode == PER_THREAD and thread is not None:
        return bool(st.per_thread_done.get(thread.thread_id))
    return False


def refcount_oracle(st: TransitionState, world: World) -> int:
    """Independent recount of residency, for invariant checking."""
    count = 0
    for tid, thread in world.threads.items():
        if thread.status != RUNNABLE:
            continue
        count += len(thread_resident_spans(st.spans, thread, world.program))
    return count
