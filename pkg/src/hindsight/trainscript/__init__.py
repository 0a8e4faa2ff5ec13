"""TrainScript: a small training-script language, its analyzer and interpreter."""

from .analyzer import (
    DEFAULT_ALLOWLIST,
    Changeset,
    LinkRule,
    LoopChangeset,
    analyze_script,
    augment_with_links,
    build_link_registry,
    estimate_changeset,
    filter_loop_scoped,
)
from .interpreter import Interpreter, evaluate, interpret_and_trace
from .parser import parse_expression, parse_script

__all__ = [
    "DEFAULT_ALLOWLIST",
    "Changeset",
    "LinkRule",
    "LoopChangeset",
    "analyze_script",
    "augment_with_links",
    "build_link_registry",
    "estimate_changeset",
    "filter_loop_scoped",
    "Interpreter",
    "evaluate",
    "interpret_and_trace",
    "parse_expression",
    "parse_script",
]
