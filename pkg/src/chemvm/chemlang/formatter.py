"""Canonical text form of a program.

Canonicalization sorts parameter and metadata keys, normalizes whitespace
and emits all quantities in base units, so two programs that differ only
in key order or unit spelling produce identical text. `parse(format(p))`
is structurally equal to `p`.
"""

from __future__ import annotations

import re

from ..jsonio import fmt_num
from .ast import ChemProgram, Quantity, UnitOperation

__all__ = ["format_program"]

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _escape(text: str) -> str:
    out = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
    return f'"{out}"'


def _value_text(v) -> str:
    if isinstance(v, Quantity):
        return f"{fmt_num(v.value)} {v.unit}"
    if isinstance(v, bool):
        raise TypeError("bool parameter")
    if isinstance(v, (int, float)):
        return fmt_num(v)
    if _IDENT_RE.match(v):
        return v
    return _escape(v)


def _step_text(op: UnitOperation) -> str:
    parts = [f"{k}={_value_text(op.params[k])}" for k in sorted(op.params)]
    return f"{op.kind.value}({', '.join(parts)})"


def format_program(prog: ChemProgram) -> str:
    lines = [f"procedure {_escape(prog.name)} {{"]
    if prog.reagents:
        lines.append("  reagents {")
        for d in prog.reagents:
            lines.append(
                f"    {d.name}: sp:{d.species} {fmt_num(d.amount.value)} {d.amount.unit}"
                f" @{d.source_vessel} {d.role}"
            )
        lines.append("  }")
    if prog.hardware:
        lines.append("  hardware {")
        for h in prog.hardware:
            lines.append(f"    {h.vessel}: {h.kind}")
        lines.append("  }")
    lines.append("  steps {")
    for op in prog.steps:
        lines.append(f"    {_step_text(op)}")
    lines.append("  }")
    if prog.metadata:
        lines.append("  meta {")
        for key in sorted(prog.metadata):
            lines.append(f"    {key} = {_escape(prog.metadata[key])}")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
