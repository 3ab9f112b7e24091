"""Static checks of a program against a hardware graph.

An empty report means the program can be compiled onto the graph: every
step has its required parameters in range, every station capability the
steps call for exists on a bindable node, and the vessel/flask demand fits
the inventory. The graph argument is duck-typed (`graph.nodes` mapping to
objects with `.kind`, `.capabilities`, `.attachments`) so this module does
not depend on the compiler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..jsonio import dumps_stable
from .ast import (
    REQUIRED_PARAMS,
    STATION_CAPABILITY,
    BUILTIN_VESSELS,
    ChemProgram,
    OpKind,
    Quantity,
)

__all__ = ["Finding", "ValidationReport", "validate_program", "MATTER_KINDS"]

TEMP_RANGE_C = (-200.0, 400.0)

# Node kinds that can hold material (vs. pure routing nodes).
MATTER_KINDS = frozenset({
    "ReagentFlask", "Reactor", "Separator", "Rotavap", "Filter",
    "Storage", "Chromatograph", "Waste", "Product",
})

# DSL hardware-kind word -> graph node kind (None = unconstrained).
_KIND_WORDS = {
    "any": None,
    "reactor": "Reactor",
    "separator": "Separator",
    "rotavap": "Rotavap",
    "filter": "Filter",
    "storage": "Storage",
    "flask": "ReagentFlask",
    "chromatograph": "Chromatograph",
}


@dataclass
class Finding:
    code: str
    message: str
    where: str

    def as_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "where": self.where}


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, code: str, message: str, where: str) -> None:
        self.findings.append(Finding(code, message, where))

    def to_json(self) -> str:
        return dumps_stable(
            {"ok": self.ok, "findings": [f.as_dict() for f in self.findings]},
            indent=2,
        ) + "\n"


def _is_reserved(node) -> bool:
    return "solvent_reservoir" in getattr(node, "attachments", ())


def validate_program(prog: ChemProgram, graph) -> ValidationReport:
    report = ValidationReport()
    _check_params(prog, report)
    _check_hardware(prog, graph, report)
    return report


def _check_params(prog: ChemProgram, report: ValidationReport) -> None:
    for i, op in enumerate(prog.steps):
        where = f"step {i + 1} ({op.kind.value}, line {op.line})"
        missing = REQUIRED_PARAMS[op.kind] - set(op.params)
        for key in sorted(missing):
            report.add("missing_param", f"{op.kind.value} requires parameter {key!r}", where)
        for key in ("temp", "cool_to"):
            v = op.params.get(key)
            if isinstance(v, Quantity) and not (TEMP_RANGE_C[0] <= v.value <= TEMP_RANGE_C[1]):
                report.add(
                    "param_out_of_range",
                    f"{key}={v.value:g} C outside [{TEMP_RANGE_C[0]:g}, {TEMP_RANGE_C[1]:g}]",
                    where,
                )
        for key in ("time", "amount"):
            v = op.params.get(key)
            if isinstance(v, Quantity) and v.value <= 0:
                report.add("param_out_of_range", f"{key} must be positive", where)


def _check_hardware(prog: ChemProgram, graph, report: ValidationReport) -> None:
    nodes = graph.nodes
    matter = {
        nid: n for nid, n in nodes.items()
        if n.kind in MATTER_KINDS and n.kind not in ("Waste", "Product")
    }

    # Station capabilities needed per program vessel (from `vessel` params).
    caps_needed: dict[str, set[str]] = {}
    for op in prog.steps:
        cap = STATION_CAPABILITY[op.kind]
        vessel = op.params.get("vessel")
        if cap and isinstance(vessel, str):
            caps_needed.setdefault(vessel, set()).add(cap)

    kind_by_vessel = {h.vessel: _KIND_WORDS.get(h.kind, h.kind) for h in prog.hardware}
    claimed: set[str] = set()
    for h in prog.hardware:
        if h.vessel in BUILTIN_VESSELS:
            continue
        where = f"hardware {h.vessel}"
        want_kind = kind_by_vessel[h.vessel]
        need = caps_needed.get(h.vessel, set())
        candidates = []
        for nid, node in matter.items():
            if nid in claimed or _is_reserved(node) or node.kind == "ReagentFlask":
                continue
            if want_kind is not None and node.kind != want_kind:
                continue
            if not need <= set(node.capabilities):
                continue
            candidates.append(nid)
        if h.vessel in nodes and h.vessel in candidates:
            claimed.add(h.vessel)  # bind by id when the graph has the name
            continue
        if not candidates:
            if need:
                report.add(
                    "missing_capability",
                    f"no available node hosts {sorted(need)} for vessel {h.vessel!r}",
                    where,
                )
            else:
                report.add(
                    "unsatisfied_hardware",
                    f"no available node of kind {h.kind!r} for vessel {h.vessel!r}",
                    where,
                )
            continue
        claimed.add(sorted(candidates)[0])

    # Source flasks: one per distinct source vessel, reserved nodes excluded.
    sources: dict[str, None] = {}
    for d in prog.reagents:
        sources.setdefault(d.source_vessel)
    flasks = [
        nid for nid, n in nodes.items()
        if n.kind == "ReagentFlask" and not _is_reserved(n)
    ]
    reserved_ids = {
        nid for nid, n in nodes.items() if n.kind == "ReagentFlask" and _is_reserved(n)
    }
    usable = [v for v in sources if v not in reserved_ids]
    if len(usable) > len(flasks):
        report.add(
            "unsatisfied_hardware",
            f"program draws from {len(usable)} source flasks but the graph has {len(flasks)}",
            "reagents",
        )
