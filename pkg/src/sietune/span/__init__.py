"""Critical and safe span construction."""

from .cs import CriticalSpan, CrossBlockExpression, SpanError, build_critical_span
from .slicer import AbsVal, EscapedDependence, Slicer
from .ss import SafeSpan, build_safe_span, compute_exits, merge_safe_spans

__all__ = [name for name in dir() if not name.startswith("_")]
